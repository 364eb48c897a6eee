"""Training objectives, each a differentiable scalar with a component breakdown.

All losses follow the small-noise convention: class logits are the raw
scores mu(y)^T psi(L) plus log priors, and eta enters unscaled.  Pass
``sigma_scaled=True`` where offered to divide by sigma^2 instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .inference import forward, max_eta_by_class
from .model import DgmParams, LatentConfig, eta, latent_grid, render

VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights of every objective term."""

    alpha_ce: float = 1.0
    alpha_rc: float = 0.5
    alpha_kl: float = 0.5
    alpha_mm: float = 0.5
    alpha_pn: float = 1.0
    alpha_max: float = 0.5
    alpha_min: float = 0.5
    maxmin: bool = False

    def __post_init__(self):
        for name in ("alpha_ce", "alpha_rc", "alpha_kl", "alpha_mm", "alpha_pn", "alpha_max", "alpha_min"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.maxmin and self.alpha_max + self.alpha_min <= 0:
            raise ConfigError("max-min cross-entropy needs alpha_max + alpha_min > 0")

    @classmethod
    def ce_only(cls) -> "LossWeights":
        return cls(1.0, 0.0, 0.0, 0.0, 0.0)

    def component_weights(self) -> dict:
        return {"ce": self.alpha_ce, "rc": self.alpha_rc, "rpn": self.alpha_rc * self.alpha_pn,
                "kl": self.alpha_kl, "mm": self.alpha_mm, "ce_max": 0.0, "ce_min": 0.0}


@dataclass
class LossReport:
    """Total loss, its named components and the weight applied to each."""

    total: float
    components: dict
    weights: dict
    node: object = field(default=None, repr=False)

    def weighted_sum(self) -> float:
        return float(sum(self.weights[k] * v for k, v in self.components.items()))


class EStepCounter:
    """Counts E-steps (fresh latent inferences) performed by the objective."""

    def __init__(self):
        self.count = 0
        self.samples = 0


# ---------------------------------------------------------------- elementary losses


def _onehot(y, k):
    y = np.asarray(y, dtype=np.intp)
    out = np.zeros((y.size, k))
    out[np.arange(y.size), y] = 1.0
    return out


def cross_entropy(logits, y):
    """-log q(y) from logits, per sample, in log space."""
    lv = nx.value_of(logits)
    if lv.ndim == 1:
        return nx.getitem(cross_entropy(nx.reshape(logits, (1, -1)), [y]), 0)
    ys = np.atleast_1d(np.asarray(y, dtype=np.intp))
    if ys.shape != (lv.shape[0],):
        raise DimensionError(f"{ys.size} labels for {lv.shape[0]} rows of logits")
    picked = nx.total(nx.mul(logits, _onehot(ys, lv.shape[1])), axis=1)
    return nx.sub(nx.logsumexp(logits, axis=1), picked)


def kl_variational(logits, log_prior):
    """KL(q(y|x) || pi) per sample, with q = softmax(logits)."""
    lv = nx.value_of(logits)
    if lv.ndim == 1:
        return nx.getitem(kl_variational(nx.reshape(logits, (1, -1)), log_prior), 0)
    log_q = nx.log_softmax(logits, axis=1)
    diff = nx.sub(log_q, nx.reshape(log_prior, (1, -1)))
    return nx.total(nx.mul(nx.exp(log_q), diff), axis=1)


def gaussian_kl(mean_p, var_p, mean_q, var_q):
    """Elementwise KL(N(mean_p, var_p) || N(mean_q, var_q))."""
    ratio = nx.div(var_p, var_q)
    sq = nx.div(nx.square(nx.sub(mean_p, mean_q)), var_q)
    return nx.mul(0.5, nx.sub(nx.add(ratio, sq), nx.add(nx.log(ratio), 1.0)))


def _batch_moments(a, floor, axes):
    m = nx.mean(a, axis=axes, keepdims=True)
    v = nx.mean(nx.square(nx.sub(a, m)), axis=axes, keepdims=True)
    return m, nx.maximum(v, floor)


def moment_matching(rendered: list, activations: list, floor: float = VARIANCE_FLOOR,
                    per_channel: bool = False, detach_activations: bool = False):
    """Sum over layers and dimensions of KL(N(h stats) || N(psi stats)).

    Each list holds one (batch, ...) array per layer; statistics are the
    per-dimension batch mean and (biased) variance, floored at ``floor``.
    ``per_channel`` pools the statistics over the batch and all spatial
    positions of each feature map instead, as batch normalisation does.
    ``detach_activations`` treats the activation statistics as constants,
    so only the rendering pathway is pulled towards them.
    """
    if len(rendered) != len(activations):
        raise DimensionError("one rendered batch per activation batch required")
    out = 0.0
    for h, psi in zip(rendered, activations):
        if nx.value_of(h).shape != nx.value_of(psi).shape:
            raise DimensionError(f"rendered {nx.value_of(h).shape} vs activation {nx.value_of(psi).shape}")
        axes = (0,) + tuple(range(2, nx.value_of(h).ndim)) if per_channel else (0,)
        mh, vh = _batch_moments(h, floor, axes)
        mp, vp = _batch_moments(nx.value_of(psi) if detach_activations else psi, floor, axes)
        out = nx.add(out, nx.total(gaussian_kl(mh, vh, mp, vp)))
    return out


# ---------------------------------------------------------------- path prior losses


def rpn(params: DgmParams, y, z: LatentConfig, eta_values=None, max_eta=None, sigma_scaled: bool = False):
    """Negative log of the relaxed joint path prior, per sample.

    The normaliser is sum_y' exp(max_z eta(y', z) + log pi_y'), with the inner
    maximum taken from the bias-only forward pass.  For the sample's own
    class the maximum is raised to at least eta(y, z*), which keeps the
    result a valid negative log-probability even when the forward pass
    under-estimates the maximum.
    """
    zb, single = z.batched(params.arch)
    n = len(zb)
    ys = np.broadcast_to(np.asarray(y, dtype=np.intp), (n,))
    k = params.n_classes
    if eta_values is None:
        eta_values = eta(params, ys, zb)
    if max_eta is None:
        max_eta = max_eta_by_class(params)
    scale = 1.0 / params.noise_sigma**2 if sigma_scaled else 1.0
    own = _onehot(ys, k)
    best = nx.reshape(max_eta, (1, k))
    own_best = nx.maximum(nx.total(nx.mul(best, own), axis=1), eta_values)
    lifted = nx.add(nx.mul(best, 1.0 - own), nx.mul(nx.reshape(own_best, (n, 1)), own))
    log_pi = nx.reshape(params.log_priors(), (1, k))
    denom = nx.logsumexp(nx.add(nx.mul(lifted, scale), log_pi), axis=1)
    numer = nx.add(nx.mul(eta_values, scale), nx.total(nx.mul(log_pi, own), axis=1))
    out = nx.sub(denom, numer)
    return nx.getitem(out, 0) if single else out


def rpn_exact(params: DgmParams, y, z: LatentConfig, sigma_scaled: bool = False) -> np.ndarray:
    """Negative log of the exact joint path prior (enumerates every path)."""
    grid = latent_grid(params.arch)
    scale = 1.0 / params.noise_sigma**2 if sigma_scaled else 1.0
    log_pi = np.log(params.class_priors)
    table = np.stack([nx.value_of(eta(params, c, grid)) for c in range(params.n_classes)])
    log_norm = float(nx.value_of(nx.logsumexp((table * scale + log_pi[:, None]).reshape(-1), axis=0)))
    zb, single = z.batched(params.arch)
    ys = np.broadcast_to(np.asarray(y, dtype=np.intp), (len(zb),))
    e = nx.value_of(eta(params, ys, zb))
    out = log_norm - (e * scale + log_pi[ys])
    return float(out[0]) if single else out


def _squared_error(x, image):
    n = nx.value_of(image).shape[0]
    diff = nx.sub(x, image)
    return nx.mul(0.5, nx.total(nx.reshape(nx.square(diff), (n, -1)), axis=1))


def reconstruction_rpn(params: DgmParams, x, y=None) -> LossReport:
    """Mean of ||x - h(y, z*; 0)||^2 / 2 plus mean relaxed RPN.

    ``z*`` comes from the forward pass; ``y`` defaults to the argmax class.
    """
    trace = forward(params, x)
    n = nx.value_of(trace.logits).shape[0]
    ys = np.argmax(nx.value_of(trace.logits), axis=1) if y is None else np.broadcast_to(np.asarray(y), (n,))
    z = LatentConfig(trace.switches, trace.offsets)
    stack = render(params, ys, z)
    xb = trace.activations[0]
    rc = nx.mean(_squared_error(xb, stack.image))
    path = nx.mean(rpn(params, ys, z, eta_values=eta(params, ys, z, stack)))
    node = nx.add(rc, path)
    return LossReport(float(nx.value_of(node)), {"rc": float(nx.value_of(rc)), "rpn": float(nx.value_of(path))},
                      {"rc": 1.0, "rpn": 1.0}, node)


def max_min_cross_entropy(params: DgmParams, x, y, alpha_max: float = 0.5, alpha_min: float = 0.5) -> LossReport:
    """alpha_max * CE(max branch) + alpha_min * CE(min branch).

    The min branch shares every weight but uses the negative rectifier and
    MinPool.  With ``alpha_min == 0`` the min branch is not evaluated.
    """
    ce_max = nx.mean(cross_entropy(forward(params, x).logits, np.atleast_1d(y)))
    node = nx.mul(alpha_max, ce_max)
    ce_min = 0.0
    if alpha_min > 0:
        ce_min = nx.mean(cross_entropy(forward(params, x, branch="min").logits, np.atleast_1d(y)))
        node = nx.add(node, nx.mul(alpha_min, ce_min))
    return LossReport(float(nx.value_of(node)),
                      {"ce_max": float(nx.value_of(ce_max)), "ce_min": float(nx.value_of(ce_min))},
                      {"ce_max": alpha_max, "ce_min": alpha_min}, node)


# ---------------------------------------------------------------- full objective


def semi_supervised_objective(params: DgmParams, x_labeled, y_labeled, x_unlabeled,
                              weights: LossWeights, counter: EStepCounter | None = None,
                              pseudo_labels=None, mm_floor: float = VARIANCE_FLOOR,
                              mm_per_channel: bool = False, mm_detach: bool = False) -> LossReport:
    """Weighted sum of CE (labeled), reconstruction + RPN, KL and moment matching (all).

    Unlabeled samples are pseudo-labeled with the argmax of their logits
    unless ``pseudo_labels`` supplies them.  Terms whose weight is zero are
    skipped and reported as 0.
    """
    x_lab = np.asarray(x_labeled, dtype=np.float64)
    x_unl = np.asarray(x_unlabeled, dtype=np.float64)
    y_lab = np.asarray(y_labeled, dtype=np.intp).reshape(-1)
    n_lab = x_lab.shape[0]
    if weights.alpha_ce > 0 and n_lab == 0:
        raise ConfigError("cross-entropy weight is positive but the labeled batch is empty")
    if y_lab.shape[0] != n_lab:
        raise DimensionError("one label per labeled image required")
    generative = weights.alpha_rc > 0 or weights.alpha_kl > 0 or weights.alpha_mm > 0
    if generative:
        parts = [a for a in (x_lab, x_unl) if a.shape[0]]
        x_all = np.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]
    else:
        x_all = x_lab
    trace = forward(params, x_all)
    logits = trace.logits
    n_all = x_all.shape[0]
    if counter is not None:
        counter.count += 1
        counter.samples += n_all
    comp = {k: 0.0 for k in ("ce", "rc", "rpn", "kl", "mm", "ce_max", "ce_min")}
    cw = weights.component_weights()
    node = 0.0

    def accumulate(name, value):
        nonlocal node
        comp[name] = float(nx.value_of(value))
        node = nx.add(node, nx.mul(cw[name], value))

    if weights.alpha_ce > 0:
        ce_max = nx.mean(cross_entropy(logits[:n_lab], y_lab))
        comp["ce_max"] = float(nx.value_of(ce_max))
        ce = ce_max
        if weights.maxmin:
            ce = nx.mul(weights.alpha_max, ce_max)
            if weights.alpha_min > 0:
                ce_min = nx.mean(cross_entropy(forward(params, x_lab, branch="min").logits, y_lab))
                comp["ce_min"] = float(nx.value_of(ce_min))
                ce = nx.add(ce, nx.mul(weights.alpha_min, ce_min))
        accumulate("ce", ce)
    if generative:
        if pseudo_labels is None:
            pseudo = np.argmax(nx.value_of(logits)[n_lab:], axis=1)
        else:
            pseudo = np.asarray(pseudo_labels, dtype=np.intp).reshape(-1)
            if pseudo.shape[0] != n_all - n_lab:
                raise DimensionError("one pseudo-label per unlabeled image required")
        ys = np.concatenate([y_lab, pseudo]) if n_all > n_lab else y_lab
        z = LatentConfig(trace.switches, trace.offsets)
        need_render = weights.alpha_rc > 0 or weights.alpha_mm > 0
        stack = render(params, ys, z) if need_render else None
        if weights.alpha_rc > 0:
            accumulate("rc", nx.mean(_squared_error(x_all, stack.image)))
            if weights.alpha_pn > 0:
                accumulate("rpn", nx.mean(rpn(params, ys, z, eta_values=eta(params, ys, z, stack))))
        if weights.alpha_kl > 0:
            accumulate("kl", nx.mean(kl_variational(logits, params.log_priors())))
        if weights.alpha_mm > 0:
            depth = params.arch.depth
            accumulate("mm", moment_matching([stack.h[l] for l in range(1, depth + 1)],
                                             [trace.activations[l] for l in range(1, depth + 1)], mm_floor,
                                             mm_per_channel, mm_detach))
    total = float(nx.value_of(node))
    return LossReport(total, comp, cw, node)


def objective_and_gradient(params: DgmParams, x_labeled, y_labeled, x_unlabeled, weights: LossWeights,
                           counter: EStepCounter | None = None, **kw):
    """The objective's report plus gradients for every parameter group."""
    tape = nx.GradTape()
    watched = params.watched(tape)
    report = semi_supervised_objective(watched, x_labeled, y_labeled, x_unlabeled, weights, counter, **kw)
    groups = watched.groups()
    if isinstance(report.node, nx.Var):
        grads = tape.gradient(report.node, list(groups.values()))
    else:
        grads = [np.zeros_like(v.value) for v in groups.values()]
    report.node = None
    return report, dict(zip(groups.keys(), grads))


# ---------------------------------------------------------------- gradient checks

CHECKED_COMPONENTS = {
    "ce": LossWeights(1.0, 0.0, 0.0, 0.0, 0.0),
    "ce_maxmin": LossWeights(1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5, maxmin=True),
    "rc": LossWeights(0.0, 1.0, 0.0, 0.0, 0.0),
    "rc_rpn": LossWeights(0.0, 1.0, 0.0, 0.0, 1.0),
    "kl": LossWeights(0.0, 0.0, 1.0, 0.0, 0.0),
    "mm": LossWeights(0.0, 0.0, 0.0, 1.0, 0.0),
}


def gradient_errors(params: DgmParams, x_labeled, y_labeled, x_unlabeled, weights: LossWeights,
                    eps: float = 1e-5, max_coords: int | None = None, rng=None, **kw) -> dict:
    """Worst relative error of the tape gradient against central differences, per parameter group."""
    groups = params.groups()
    out = {}
    for name, value in groups.items():
        def f(v, name=name):
            p = params.with_groups({**groups, name: v})
            return semi_supervised_objective(p, x_labeled, y_labeled, x_unlabeled, weights, **kw).node
        out[name] = nx.grad_check(f, value, eps, max_coords=max_coords, rng=rng)
    return out
