"""Bottom-up inference: the CNN forward pass that recovers the best rendering path."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError, FormatError
from .model import DENSE, RES, DgmParams, LatentConfig, RenderStack, render


@dataclass(frozen=True)
class InferenceTrace:
    """Everything one forward pass produces, batched over the leading axis.

    ``activations[l]`` is psi(l) with ``activations[0]`` the input;
    ``switches``/``offsets`` are the argmax latents s*, t*; ``logits`` are
    the class scores plus log priors (scores divided by sigma^2 first when
    the trace was computed with ``sigma_scaled``).
    """

    activations: tuple
    switches: tuple
    offsets: tuple
    class_scores: object
    logits: object
    branch: str = "max"
    batched: bool = True


def _as_batch(x, params: DgmParams):
    xv = nx.value_of(x)
    want = params.arch.input_shape
    if xv.shape == want:
        return nx.reshape(x, (1,) + want), True
    if xv.ndim == 4 and xv.shape[1:] == want:
        return x, False
    raise DimensionError(f"input shape {xv.shape} does not match model input {want}")


def forward(params: DgmParams, x, branch: str = "max", sigma_scaled: bool = False) -> InferenceTrace:
    """psi(l) = Pool(Act(Conv(W(l), psi(l-1)) + b(l) [+ skip])) with latents recorded.

    The max branch uses ReLU and MaxPool; the min branch uses the negative
    rectifier and MinPool with the same weights.  Dense layers append their
    input to the pooled output.
    """
    arch = params.arch
    x, single = _as_batch(x, params)
    off = arch.leaky_slope
    take_max = branch == "max"
    if branch not in ("max", "min"):
        raise ValueError(f"unknown branch {branch!r}")
    psi = [x]
    switches, offsets = [], []
    for ell, spec in enumerate(arch.layers, start=1):
        c = spec.channels
        pre = nx.conv2d(psi[-1], params.weights[ell - 1], spec.padding)
        pre = nx.add(pre, nx.reshape(params.biases[ell - 1], (1, c, 1, 1)))
        if spec.kind == RES:
            src = psi[ell - spec.skip_span]
            proj = params.skip_weights[ell - 1]
            pre = nx.add(pre, src if proj is None else nx.conv2d(src, proj))
        if take_max:
            act = nx.relu(pre) if off == 0 else nx.leaky_relu(pre, off)
        else:
            act = nx.nrelu(pre) if off == 0 else nx.leaky_nrelu(pre, off)
        pre_v = nx.value_of(pre)
        if spec.n_window > 1:
            pool = nx.maxpool if take_max else nx.minpool
            out, idx = pool(act, spec.window, spec.stride)
            chosen = nx.gather_pooled(pre_v, idx)
            offsets.append(idx.window_index)
        else:
            out = act
            chosen = pre_v
            offsets.append(np.zeros(pre_v.shape, dtype=np.intp))
        on = chosen > 0 if take_max else chosen < 0
        switches.append(np.where(on, 1.0, off))
        if spec.kind == DENSE:
            out = nx.concat([out, psi[-1]], axis=1)
        psi.append(out)
    n = nx.value_of(x).shape[0]
    flat = nx.reshape(psi[-1], (n, -1))
    mu = nx.reshape(params.class_templates, (arch.n_classes, -1))
    scores = nx.matmul(flat, _transpose(mu))
    scaled = nx.div(scores, params.noise_sigma**2) if sigma_scaled else scores
    logits = nx.add(scaled, nx.reshape(params.log_priors(), (1, arch.n_classes)))
    return InferenceTrace(tuple(psi), tuple(switches), tuple(offsets), scores, logits, branch, not single)


def _transpose(m):
    mv = nx.value_of(m)
    if isinstance(m, nx.Var):
        return nx._emit(mv.T, (m,), lambda g: (g.T,))
    return mv.T


def res_forward(params: DgmParams, x, **kw) -> InferenceTrace:
    """Forward pass of a model containing residual layers."""
    if not any(s.kind == RES for s in params.arch.layers):
        raise DimensionError("architecture has no residual layer")
    return forward(params, x, **kw)


def dense_forward(params: DgmParams, x, **kw) -> InferenceTrace:
    """Forward pass of a model containing dense (concatenating) layers."""
    if not any(s.kind == DENSE for s in params.arch.layers):
        raise DimensionError("architecture has no dense layer")
    return forward(params, x, **kw)


def jmap_latents(trace: InferenceTrace):
    """(y*, z*): the argmax class and the recorded argmax path."""
    y = np.argmax(nx.value_of(trace.logits), axis=1)
    z = LatentConfig(trace.switches, trace.offsets)
    if not trace.batched:
        return int(y[0]), z[0]
    return y, z


def posterior(params: DgmParams, x, sigma_scaled: bool = False) -> np.ndarray:
    """q(y | x) = softmax of the forward-pass logits."""
    trace = forward(params, x, sigma_scaled=sigma_scaled)
    q = nx.softmax_logits(nx.value_of(trace.logits), axis=1)
    return q if trace.batched else q[0]


def reconstruct(params: DgmParams, x, y=None) -> np.ndarray:
    """Render h(y, z*; 0) from the latents inferred on ``x``.

    ``y`` defaults to the argmax class of the forward pass.
    """
    trace = forward(params, x)
    y_star, z_star = jmap_latents(trace)
    if y is None:
        y = y_star
    return nx.value_of(render(params, y, z_star).image)


def max_eta_by_class(params: DgmParams, branch: str = "max"):
    """Per-class max over z of eta(y, z), via the forward pass on a zero image.

    Exact when every rendered layer is non-negative; otherwise a lower bound
    (the forward pass's own path is always feasible).
    """
    zero = np.zeros((1,) + params.arch.input_shape)
    scores = forward(params, zero, branch=branch).class_scores
    return nx.reshape(scores, (params.n_classes,))


def render_trace(params: DgmParams, y, trace: InferenceTrace) -> RenderStack:
    """Render the path recorded in ``trace`` for classes ``y``."""
    return render(params, y, LatentConfig(trace.switches, trace.offsets))


def batchnorm_layer(x, scale=1.0, shift=0.0, eps: float = 1e-5):
    """Per-feature-map (x - mean) / sqrt(var + eps) * scale + shift over the batch."""
    xv = nx.value_of(x)
    if xv.ndim != 4:
        raise DimensionError(f"batchnorm expects NCHW, got {xv.shape}")
    c = xv.shape[1]
    m = nx.mean(x, axis=(0, 2, 3), keepdims=True)
    centred = nx.sub(x, m)
    var = nx.mean(nx.square(centred), axis=(0, 2, 3), keepdims=True)
    normed = nx.div(centred, nx.exp(nx.mul(0.5, nx.log(nx.add(var, eps)))))
    scale = nx.reshape(scale, (1, c, 1, 1)) if np.ndim(nx.value_of(scale)) else scale
    shift = nx.reshape(shift, (1, c, 1, 1)) if np.ndim(nx.value_of(shift)) else shift
    return nx.add(nx.mul(normed, scale), shift)


def to_gray8(image) -> np.ndarray:
    """Clamp to [0, 1] and scale to 8-bit gray levels."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise DimensionError("only single-channel images export to PGM")
        img = img[0]
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image) -> None:
    """Binary PGM (P5, maxval 255, row-major)."""
    gray = to_gray8(image)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise FormatError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    pixels = np.frombuffer(data[m.end():m.end() + w * h], dtype=np.uint8).reshape(h, w)
    return pixels.astype(np.float64) / maxval
