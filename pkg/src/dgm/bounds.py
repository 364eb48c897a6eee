"""Exhaustive numerical checks of the likelihood and cross-entropy bounds.

Every check enumerates all rendering paths of a micro-model, computes the
exact quantity in the middle of an inequality, and compares it with the
tractable bounds.  The joint path prior used throughout is
p(y, z) proportional to exp(eta(y, z) / sigma^2 + log pi_y) over all paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import numerics as nx
from .errors import CapacityError, DgmError
from .inference import forward, jmap_latents, max_eta_by_class
from .model import ENUMERATION_GUARD, DgmParams, eta, latent_grid, render

TOLERANCE = 1e-9


class NormalizationError(DgmError):
    """No latent path has a non-zero rendered image for every class."""


@dataclass(frozen=True)
class BoundReport:
    """One checked inequality ``lhs <= mid <= rhs`` (``lhs`` or ``rhs`` may be infinite)."""

    theorem: str
    lhs: float
    mid: float
    rhs: float
    seed: int | None = None

    @property
    def slack(self) -> float:
        return min(self.mid - self.lhs, self.rhs - self.mid)

    @property
    def holds(self) -> bool:
        return self.slack >= -TOLERANCE

    def row(self) -> dict:
        return {"theorem": self.theorem, "seed": "" if self.seed is None else self.seed,
                "lhs": repr(self.lhs), "mid": repr(self.mid), "rhs": repr(self.rhs),
                "slack": repr(self.slack), "holds": int(self.holds)}


@dataclass(frozen=True)
class PathTable:
    """Rendered images and eta for every (class, path) pair.

    ``images`` has shape (K, |L|, D0) and ``eta`` (K, |L|).
    """

    images: np.ndarray
    eta: np.ndarray

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.images, axis=2)


def path_table(params: DgmParams, guard: int = ENUMERATION_GUARD) -> PathTable:
    grid = latent_grid(params.arch, guard)
    images, etas = [], []
    for y in range(params.n_classes):
        stack = render(params, y, grid)
        images.append(nx.value_of(stack.image).reshape(len(grid), -1))
        etas.append(np.broadcast_to(nx.value_of(eta(params, y, grid, stack)), (len(grid),)))
    return PathTable(np.stack(images), np.stack(etas))


def normalized_table(table: PathTable, gamma: float = 1.0) -> PathTable:
    """Rescale every path so that ||h(y, z; 0)|| = gamma.

    Scaling mu(y) scales the whole render stack, so eta scales with the
    image.  Paths with a zero image for some class cannot be normalised and
    are dropped for all classes; an empty remainder is an error.
    """
    norms = table.norms
    keep = np.all(norms > 1e-12, axis=0)
    if not keep.any():
        raise NormalizationError("no latent path renders a non-zero image for every class")
    factor = gamma / norms[:, keep]
    return PathTable(table.images[:, keep] * factor[..., None], table.eta[:, keep] * factor)


def _flat(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == params.arch.input_shape:
        x = x[None]
    return x, x.reshape(x.shape[0], -1)


def _gaussian_loglik(table: PathTable, xf: np.ndarray, sigma: float) -> np.ndarray:
    """log N(x | h(y, z), sigma^2 I) for every sample and path: (n, K, |L|)."""
    d = xf.shape[1]
    sq = (np.sum(xf**2, axis=1)[:, None, None] - 2 * np.einsum("nd,kld->nkl", xf, table.images)
          + np.sum(table.images**2, axis=2)[None])
    return -0.5 * sq / sigma**2 - 0.5 * d * math.log(2 * math.pi * sigma**2)


def _log_joint(params, table: PathTable, xf) -> np.ndarray:
    """Exact log p(x, y, z) up to a constant shared by all samples and paths."""
    sigma = params.noise_sigma
    log_pi = np.log(params.class_priors)
    prior = table.eta / sigma**2 + log_pi[:, None]
    return _gaussian_loglik(table, xf, sigma) + prior[None]


def _cnn_scores(params, x):
    return nx.value_of(forward(params, x, sigma_scaled=True).logits)


# ---------------------------------------------------------------- cross-entropy sandwich


def verify_ce_sandwich(params: DgmParams, x, y, normalize: bool = True, gamma: float = 1.0,
                       seed: int | None = None, table: PathTable | None = None) -> BoundReport:
    """-H <= mean_i max_z log p(y_i | x_i, z) <= -H + mean gap + log K.

    With ``normalize`` every path is rescaled to a common norm and the
    posterior q(y|x) is the softmax of max_z phi(y, z), phi = (h^T x + eta)/sigma^2
    + log pi_y.  Without it the check uses the forward-pass logits g and
    widens both sides by (M2^2 - M1^2) / (2 sigma^2), where M1, M2 are the
    smallest and largest rendered norms.
    """
    sigma2 = params.noise_sigma**2
    y = np.asarray(y, dtype=np.intp).reshape(-1)
    x, xf = _flat(params, x)
    n = xf.shape[0]
    k = params.n_classes
    table = table or path_table(params)
    log_pi = np.log(params.class_priors)
    rows = np.arange(n)
    if normalize:
        table = normalized_table(table, gamma)
    # exact conditional log p(y | x, z) from the Gaussian model
    joint = _log_joint(params, table, xf)                      # n K L
    cond = joint - logsumexp(joint, axis=1, keepdims=True)
    own = cond[rows, y]                                        # n L
    mid = float(np.mean(own.max(axis=1)))
    z_bar = own.argmax(axis=1)
    phi_raw = (np.einsum("nd,kld->nkl", xf, table.images) + table.eta[None]) / sigma2
    if normalize:
        phi = phi_raw + log_pi[None, :, None]
        best = phi.max(axis=2)                                  # n K
        log_q = best - logsumexp(best, axis=1, keepdims=True)
        neg_h = float(np.mean(log_q[rows, y]))
        gap = np.max(best - phi[rows, :, z_bar], axis=1)
        return BoundReport("ce_sandwich", neg_h, mid, neg_h + float(np.mean(gap)) + math.log(k), seed)
    norms = table.norms
    widen = (norms.max() ** 2 - norms.min() ** 2) / (2 * sigma2)
    g = _cnn_scores(params, x) - log_pi[None]                  # forward logits without priors
    log_qt = (g + log_pi) - logsumexp(g + log_pi, axis=1, keepdims=True)
    neg_h = float(np.mean(log_qt[rows, y]))
    cnn_loss = phi_raw[rows, y].max(axis=1) - g[rows, y]
    gap = np.max(g - phi_raw[rows, :, z_bar], axis=1)
    rhs = neg_h + float(np.mean(cnn_loss + gap)) + math.log(k) + widen
    return BoundReport("ce_sandwich_relaxed", neg_h - widen, mid, rhs, seed)


# ---------------------------------------------------------------- posterior sandwich


def verify_posterior_bounds(params: DgmParams, x, y, normalize: bool = True, gamma: float = 1.0,
                            seed: int | None = None, table: PathTable | None = None) -> BoundReport:
    """-log|L| - H <= mean_i max_z log p(y_i, z | x_i) <= -H.

    The relaxed variant (no common norm) uses the forward-pass logits and
    widens by the norm spread; its lower side carries the prior-weighted
    normaliser LSE_y(g + log pi) - max_{y,z}(phi), which keeps it valid for
    non-uniform class priors.
    """
    sigma2 = params.noise_sigma**2
    y = np.asarray(y, dtype=np.intp).reshape(-1)
    x, xf = _flat(params, x)
    n = xf.shape[0]
    table = table or path_table(params)
    log_pi = np.log(params.class_priors)
    rows = np.arange(n)
    if normalize:
        table = normalized_table(table, gamma)
    joint = _log_joint(params, table, xf)
    post = joint - logsumexp(joint.reshape(n, -1), axis=1)[:, None, None]
    mid = float(np.mean(post[rows, y].max(axis=1)))
    n_paths = table.eta.shape[1]
    phi = (np.einsum("nd,kld->nkl", xf, table.images) + table.eta[None]) / sigma2 + log_pi[None, :, None]
    if normalize:
        best = phi.max(axis=2)
        log_q = best - logsumexp(best, axis=1, keepdims=True)
        neg_h = float(np.mean(log_q[rows, y]))
        return BoundReport("posterior_sandwich", neg_h - math.log(n_paths), mid, neg_h, seed)
    norms = table.norms
    widen = (norms.max() ** 2 - norms.min() ** 2) / (2 * sigma2)
    logits = _cnn_scores(params, x)                             # g + log pi
    log_qt = logits - logsumexp(logits, axis=1, keepdims=True)
    neg_h = float(np.mean(log_qt[rows, y]))
    g = logits - log_pi[None]
    cnn_loss = (phi[rows, y].max(axis=1) - log_pi[y]) - g[rows, y]
    rhs = neg_h + float(np.mean(cnn_loss)) + widen
    n_joint = params.n_classes * n_paths
    spread = logsumexp(logits, axis=1) - phi.reshape(n, -1).max(axis=1)
    lhs = neg_h + float(np.mean(spread)) - math.log(n_joint) - widen
    return BoundReport("posterior_sandwich_relaxed", lhs, mid, rhs, seed)


# ---------------------------------------------------------------- U_n versus V_n


@dataclass(frozen=True)
class UnVn:
    """Exact U_n, relaxed V_n and the per-sample terms entering their bounds."""

    u: float
    v: float
    log_paths: float
    prior_loss: float
    norm_loss: float


def un_vn(params: DgmParams, x, table: PathTable | None = None) -> UnVn:
    """U_n and V_n by enumeration (noise-free regime, eta unscaled)."""
    x, xf = _flat(params, x)
    n = xf.shape[0]
    table = table or path_table(params)
    log_pi = np.log(params.class_priors)
    k, n_paths = table.eta.shape
    prior = table.eta + log_pi[:, None]                         # K L
    log_z = float(logsumexp(prior))
    log_zhat = float(logsumexp(table.eta.max(axis=1) + log_pi))
    sq = 0.5 * (np.sum(xf**2, axis=1)[:, None, None] - 2 * np.einsum("nd,kld->nkl", xf, table.images)
                + np.sum(table.images**2, axis=2)[None])
    cost = (sq - prior[None]).reshape(n, -1)
    best = cost.argmin(axis=1)
    u = float(np.mean(cost[np.arange(n), best])) + log_z
    score = (np.einsum("nd,kld->nkl", xf, table.images) + table.eta[None]).reshape(n, -1)
    pick = score.argmax(axis=1)
    v = float(np.mean(cost[np.arange(n), pick])) + log_zhat
    y_bar, y_til = best // n_paths, pick // n_paths
    norms2 = np.sum(table.images**2, axis=2).reshape(-1)
    prior_loss = float(np.mean(log_pi[y_til] - log_pi[y_bar]))
    norm_loss = float(np.mean(0.5 * (norms2[best] - norms2[pick])))
    return UnVn(u, v, math.log(n_paths), prior_loss, norm_loss)


def vn_forward(params: DgmParams, x) -> float:
    """V_n through the forward pass: argmax of h^T x + eta (no prior), its path, bias-only maxima."""
    x, xf = _flat(params, x)
    trace = forward(params, x)
    _, z = jmap_latents(trace)
    y = np.argmax(nx.value_of(trace.class_scores), axis=1)
    stack = render(params, y, z)
    h = nx.value_of(stack.image).reshape(len(y), -1)
    e = nx.value_of(eta(params, y, z, stack))
    log_pi = np.log(params.class_priors)
    log_zhat = float(logsumexp(nx.value_of(max_eta_by_class(params)) + log_pi))
    cost = 0.5 * np.sum((xf - h) ** 2, axis=1) - e - log_pi[y]
    return float(np.mean(cost)) + log_zhat


def verify_un_vn(params: DgmParams, x, gamma_bar: float | None = None, seed: int | None = None,
                 table: PathTable | None = None) -> tuple[BoundReport, BoundReport]:
    """Both directions relating U_n and V_n.

    upper: U_n <= V_n + log(1/gamma_bar - 1) + log|L|
    lower: U_n >= V_n + log(gamma_bar / (1 - gamma_bar)) + mean (||h_bar||^2 - ||h_tilde||^2) / 2
    where (y_bar, z_bar) minimises the U_n cost and (y_tilde, z_tilde)
    maximises h^T x + eta.  Requires every pi_y >= gamma_bar and gamma_bar < 1/2.
    """
    gamma_bar = params.prior_floor if gamma_bar is None else gamma_bar
    if not 0 < gamma_bar < 0.5:
        raise ValueError("gamma_bar must lie in (0, 1/2)")
    if np.any(params.class_priors < gamma_bar - 1e-15):
        raise ValueError("class priors fall below gamma_bar")
    r = un_vn(params, x, table)
    upper = BoundReport("un_vn_upper", -math.inf, r.u, r.v + math.log(1 / gamma_bar - 1) + r.log_paths, seed)
    lower = BoundReport("un_vn_lower", r.v + math.log(gamma_bar / (1 - gamma_bar)) + r.norm_loss,
                        r.u, math.inf, seed)
    return upper, lower


# ---------------------------------------------------------------- conjugacy


def conjugate_form_check(params: DgmParams, x, gamma: float = 1.0, table: PathTable | None = None) -> float:
    """Spread over (y, z) of log p(y,z|x) - log p(y,z) - <h(y,z;0), x>/sigma^2.

    Paths are rescaled to a common norm, so the residual should be one
    constant; the return value is max minus min of the residual.
    """
    sigma2 = params.noise_sigma**2
    x, xf = _flat(params, x)
    table = normalized_table(table or path_table(params), gamma)
    log_pi = np.log(params.class_priors)
    prior = table.eta / sigma2 + log_pi[:, None]
    log_prior = prior - logsumexp(prior)
    joint = _gaussian_loglik(table, xf, params.noise_sigma) + log_prior[None]
    log_post = joint - logsumexp(joint.reshape(xf.shape[0], -1), axis=1)[:, None, None]
    resid = log_post - log_prior[None] - np.einsum("nd,kld->nkl", xf, table.images) / sigma2
    flat = resid.reshape(xf.shape[0], -1)
    return float(np.max(flat.max(axis=1) - flat.min(axis=1)))


# ---------------------------------------------------------------- active paths


def count_active_paths(params: DgmParams, x, y=None) -> tuple[int, int, float]:
    """Distinct (y, z*) chosen by inference over a dataset, out of K * |L|.

    ``y`` supplies labels (entries < 0 are pseudo-labeled); missing labels
    use the argmax class.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape == params.arch.input_shape:
        x = x[None]
    trace = forward(params, x)
    y_star, z = jmap_latents(trace)
    if y is not None:
        y = np.asarray(y, dtype=np.intp).reshape(-1)
        y_star = np.where(y >= 0, y, y_star)
    seen = {(int(c), z[i].key()) for i, c in enumerate(y_star)}
    total = params.n_classes * params.arch.n_paths()
    try:
        ratio = len(seen) / total
    except OverflowError:
        ratio = 0.0
    return len(seen), total, ratio


def log_active_ratio(active: int, params: DgmParams) -> float:
    return math.log(active) - math.log(params.n_classes) - params.arch.log_n_paths()


def all_reports(params: DgmParams, x, y, seed: int | None = None) -> list[BoundReport]:
    """Every bound check on one model and dataset."""
    table = path_table(params)
    reports = []
    for normalize in (True, False):
        try:
            reports.append(verify_ce_sandwich(params, x, y, normalize=normalize, seed=seed, table=table))
            reports.append(verify_posterior_bounds(params, x, y, normalize=normalize, seed=seed, table=table))
        except NormalizationError:
            continue
    reports.extend(verify_un_vn(params, x, seed=seed, table=table))
    return reports


__all__ = ["BoundReport", "NormalizationError", "PathTable", "path_table", "normalized_table",
           "verify_ce_sandwich", "verify_posterior_bounds", "verify_un_vn", "un_vn", "vn_forward",
           "conjugate_form_check", "count_active_paths", "log_active_ratio", "all_reports",
           "CapacityError"]
