"""Array primitives with a small tape-based reverse-mode differentiator.

Plain ``numpy.ndarray`` (float64) is the tensor type.  Every primitive accepts
either arrays or :class:`Var` handles; when any argument is a ``Var`` the
result is a ``Var`` recorded on the shared :class:`GradTape`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError

__all__ = [
    "GradTape", "Var", "PoolIndices", "value_of", "ensure_finite",
    "add", "sub", "mul", "div", "neg", "square", "exp", "log", "total", "mean",
    "reshape", "take", "concat", "getitem", "maximum", "logsumexp", "matmul",
    "conv2d", "conv_transpose", "maxpool", "minpool", "unpool", "relu", "nrelu",
    "leaky_relu", "softmax_logits", "log_softmax", "grad_check", "conv_padding",
]


# ---------------------------------------------------------------- tape


class GradTape:
    """Ordered record of primitive operations for one backward pass.

    Use :meth:`watch` to register inputs, evaluate any expression built from
    the primitives in this module, then call :meth:`gradient` once.
    """

    def __init__(self):
        self._nodes: list[tuple[int, tuple, Callable]] = []
        self._count = 0
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def _new_var(self, value) -> "Var":
        var = Var(value, self, self._count)
        self._count += 1
        return var

    def watch(self, value) -> "Var":
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        return self._new_var(np.array(value, dtype=np.float64))

    def record(self, value, parents: Sequence, vjp: Callable) -> "Var":
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        out = self._new_var(value)
        ids = tuple(p.index if isinstance(p, Var) else None for p in parents)
        self._nodes.append((out.index, ids, vjp))
        return out

    def gradient(self, target: "Var", sources: Sequence["Var"]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` with respect to each source."""
        if self._consumed:
            raise RuntimeError("a tape is consumed by exactly one backward pass")
        if not isinstance(target, Var) or target.tape is not self:
            raise ValueError("target was not recorded on this tape")
        if target.value.size != 1:
            raise DimensionError(f"gradient target must be scalar, got shape {target.shape}")
        self._consumed = True
        grads = {target.index: np.ones_like(target.value)}
        for out_id, parent_ids, vjp in reversed(self._nodes):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for pid, pg in zip(parent_ids, vjp(g)):
                if pid is None or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        out = []
        for src in sources:
            if src.tape is not self:
                raise ValueError("source was not watched on this tape")
            g = grads.get(src.index)
            out.append(np.zeros_like(src.value) if g is None else np.asarray(g, dtype=np.float64))
        self._nodes = []
        return out


class Var:
    """Handle to an array value tracked on a :class:`GradTape`."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make numpy defer to our operators

    def __init__(self, value, tape: GradTape, index: int):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Var(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return total(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value_of(a) -> np.ndarray:
    """The raw array behind ``a`` (identity for arrays)."""
    return a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)


def _tape_of(*args) -> GradTape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _emit(value, parents, vjp):
    tape = _tape_of(*parents)
    if tape is None:
        return value
    return tape.record(value, parents, vjp)


def ensure_finite(a, what: str = "value"):
    v = value_of(a)
    if not np.all(np.isfinite(v)):
        raise NumericError(f"non-finite {what} encountered")
    return a


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit(av / bv, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / bv**2, bv.shape)))


def neg(a):
    return _emit(-value_of(a), (a,), lambda g: (-g,))


def square(a):
    av = value_of(a)
    return _emit(av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a):
    out = np.exp(value_of(a))
    return _emit(out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def maximum(a, b):
    """Elementwise maximum; on ties the gradient goes to ``a``."""
    av, bv = value_of(a), value_of(b)
    pick_a = av >= bv
    return _emit(np.where(pick_a, av, bv), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), av.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), bv.shape)))


def relu(a):
    av = value_of(a)
    on = av > 0
    return _emit(np.where(on, av, 0.0), (a,), lambda g: (np.where(on, g, 0.0),))


def nrelu(a):
    """Negative rectifier ``min(x, 0)``."""
    av = value_of(a)
    on = av < 0
    return _emit(np.where(on, av, 0.0), (a,), lambda g: (np.where(on, g, 0.0),))


def leaky_relu(a, slope: float):
    av = value_of(a)
    on = av > 0
    return _emit(np.where(on, av, slope * av), (a,), lambda g: (np.where(on, g, slope * g),))


def leaky_nrelu(a, slope: float):
    av = value_of(a)
    on = av < 0
    return _emit(np.where(on, av, slope * av), (a,), lambda g: (np.where(on, g, slope * g),))


# ---------------------------------------------------------------- reductions and shape


def total(a, axis=None, keepdims=False):
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _emit(np.asarray(out, dtype=np.float64), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return div(total(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a, shape):
    av = value_of(a)
    return _emit(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def getitem(a, key):
    av = value_of(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, key, g)
        return (out,)

    return _emit(av[key], (a,), vjp)


def take(a, indices, axis: int = 0):
    """Gather slices of ``a`` along ``axis`` (indices may repeat)."""
    av = value_of(a)
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, (slice(None),) * axis + (idx,), g)
        return (out,)

    return _emit(np.take(av, idx, axis=axis), (a,), vjp)


def concat(parts: Sequence, axis: int = 0):
    values = [value_of(p) for p in parts]
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(values)))

    return _emit(np.concatenate(values, axis=axis), tuple(parts), vjp)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def logsumexp(a, axis=-1, keepdims=False):
    av = value_of(a)
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(av - m), axis=axis, keepdims=True)) + m
    weights = np.exp(av - out)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return _emit(out, (a,), vjp)


def log_softmax(logits, axis=-1):
    return sub(logits, logsumexp(logits, axis=axis, keepdims=True))


def softmax_logits(logits, axis=-1) -> np.ndarray:
    """Softmax computed with a max shift, so it never overflows."""
    z = np.asarray(value_of(logits), dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise DimensionError("softmax of an empty input")
    ensure_finite(z, "logits")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------- convolution


def conv_padding(padding, kh: int, kw: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Resolve a padding mode to ((top, bottom), (left, right))."""
    if padding == "valid":
        return (0, 0), (0, 0)
    if padding == "same":
        return ((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2)
    if padding == "full":
        return (kh - 1, kh - 1), (kw - 1, kw - 1)
    if isinstance(padding, int):
        return (padding, padding), (padding, padding)
    try:
        (pt, pb), (pl, pr) = padding
    except (TypeError, ValueError):
        raise DimensionError(f"unknown padding {padding!r}") from None
    return (int(pt), int(pb)), (int(pl), int(pr))


def _conv_forward(x, w, pads):
    (pt, pb), (pl, pr) = pads
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N C Ho Wo kh kw
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N Ho Wo O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), win


def _conv_adjoint(g, w, pads, in_hw):
    """Adjoint of cross-correlation with respect to its input."""
    (pt, pb), (pl, pr) = pads
    n, _, ho, wo = g.shape
    c, kh, kw = w.shape[1:]
    h, wd = in_hw
    out = np.zeros((n, c, h + pt + pb, wd + pl + pr))
    spread = np.tensordot(g, w, axes=([1], [0]))  # N Ho Wo C kh kw
    spread = spread.transpose(0, 3, 4, 5, 1, 2)  # N C kh kw Ho Wo
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ho, j:j + wo] += spread[:, :, i, j]
    return out[:, :, pt:pt + h, pl:pl + wd]


def _check_conv(xs, ws, pads):
    if len(xs) != 4 or len(ws) != 4:
        raise DimensionError(f"conv2d expects NCHW input and OCkk filters, got {xs} and {ws}")
    if xs[1] != ws[1]:
        raise DimensionError(f"channel mismatch: input {xs} vs filters {ws}")
    (pt, pb), (pl, pr) = pads
    if ws[2] > xs[2] + pt + pb or ws[3] > xs[3] + pl + pr:
        raise DimensionError(f"filter {ws} larger than padded input {xs}")


def conv2d(x, w, padding="valid"):
    """Multi-channel cross-correlation (no kernel flip).

    ``x`` is (C, H, W) or (N, C, H, W); ``w`` is (O, C, kh, kw).
    """
    xv, wv = value_of(x), value_of(w)
    if xv.ndim == 3:
        out = conv2d(reshape(x, (1,) + xv.shape), w, padding)
        return reshape(out, value_of(out).shape[1:])
    pads = conv_padding(padding, *wv.shape[2:])
    _check_conv(xv.shape, wv.shape, pads)
    out, win = _conv_forward(xv, wv, pads)

    def vjp(g):
        gx = _conv_adjoint(g, wv, pads, xv.shape[2:]) if isinstance(x, Var) else None
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if isinstance(w, Var) else None
        return gx, gw

    return _emit(out, (x, w), vjp)


def conv_transpose(u, w, padding="valid"):
    """Adjoint of :func:`conv2d` in its input: scatters each pixel's template.

    ``u`` is (N, O, Hc, Wc); the result is (N, C, H, W) where ``conv2d`` of a
    (C, H, W) image with ``w`` and ``padding`` has spatial size (Hc, Wc).
    """
    uv, wv = value_of(u), value_of(w)
    if uv.ndim != 4 or wv.ndim != 4 or uv.shape[1] != wv.shape[0]:
        raise DimensionError(f"conv_transpose shape mismatch: {uv.shape} vs filters {wv.shape}")
    pads = conv_padding(padding, *wv.shape[2:])
    (pt, pb), (pl, pr) = pads
    h = uv.shape[2] + wv.shape[2] - 1 - pt - pb
    wd = uv.shape[3] + wv.shape[3] - 1 - pl - pr
    if h < 1 or wd < 1:
        raise DimensionError(f"conv_transpose output would be empty for {uv.shape}, {wv.shape}")
    out = _conv_adjoint(uv, wv, pads, (h, wd))

    def vjp(g):
        gu = gw = None
        if isinstance(u, Var) or isinstance(w, Var):
            back, win = _conv_forward(g, wv, pads)
            if isinstance(u, Var):
                gu = back
            if isinstance(w, Var):
                gw = np.tensordot(uv, win, axes=([0, 2, 3], [0, 2, 3]))
        return gu, gw

    return _emit(out, (u, w), vjp)


# ---------------------------------------------------------------- pooling


@dataclass(frozen=True)
class PoolIndices:
    """Selected element of every pooling window.

    ``window_index`` holds the row-major offset inside the window (the
    translation choice); :attr:`flat` maps it to a flat index into the
    spatial plane of the pooled input.
    """

    window_index: np.ndarray
    window: tuple[int, int]
    stride: tuple[int, int]
    input_hw: tuple[int, int]

    @property
    def flat(self) -> np.ndarray:
        ph, pw = self.window
        sh, sw = self.stride
        hp, wp = self.window_index.shape[-2:]
        rows = np.arange(hp)[:, None] * sh + self.window_index // pw
        cols = np.arange(wp)[None, :] * sw + self.window_index % pw
        return rows * self.input_hw[1] + cols


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def pooled_extent(h: int, w: int, window, stride=None) -> tuple[int, int]:
    ph, pw = _pair(window)
    sh, sw = _pair(window if stride is None else stride)
    if ph > h or pw > w:
        raise DimensionError(f"pool window {(ph, pw)} larger than input {(h, w)}")
    if (h - ph) % sh or (w - pw) % sw:
        raise DimensionError(f"pool window {(ph, pw)} stride {(sh, sw)} does not tile {(h, w)}")
    return (h - ph) // sh + 1, (w - pw) // sw + 1


def _pool(x, window, stride, take_max: bool):
    xv = value_of(x)
    squeeze = xv.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + xv.shape)
        xv = value_of(x)
    ph, pw = _pair(window)
    sh, sw = _pair(window if stride is None else stride)
    hp, wp = pooled_extent(xv.shape[2], xv.shape[3], (ph, pw), (sh, sw))
    win = sliding_window_view(xv, (ph, pw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :hp, :wp]
    win = win.reshape(win.shape[:4] + (ph * pw,))
    idx = win.argmax(axis=-1) if take_max else win.argmin(axis=-1)
    vals = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    indices = PoolIndices(idx, (ph, pw), (sh, sw), tuple(xv.shape[2:]))
    out = _emit(vals, (x,), lambda g: (_scatter(g, indices),))
    if squeeze:
        out = reshape(out, vals.shape[1:])
        indices = PoolIndices(idx[0], (ph, pw), (sh, sw), tuple(xv.shape[2:]))
    return out, indices


def maxpool(x, window=(2, 2), stride=None):
    """Window maxima and their positions; ties go to the lowest flat index."""
    return _pool(x, window, stride, True)


def minpool(x, window=(2, 2), stride=None):
    """Window minima and their positions; ties go to the lowest flat index."""
    return _pool(x, window, stride, False)


def _scatter(v, indices: PoolIndices):
    ph, pw = indices.window
    sh, sw = indices.stride
    lead = v.shape[:-2]
    hp, wp = v.shape[-2:]
    out = np.zeros(lead + tuple(indices.input_hw))
    for a in range(ph):
        for b in range(pw):
            hit = indices.window_index == a * pw + b
            if hit.any():
                out[..., a:a + sh * (hp - 1) + 1:sh, b:b + sw * (wp - 1) + 1:sw] += np.where(hit, v, 0.0)
    return out


def _gather(g, indices: PoolIndices):
    ph, pw = indices.window
    sh, sw = indices.stride
    hp, wp = indices.window_index.shape[-2:]
    out = np.zeros(g.shape[:-2] + (hp, wp))
    for a in range(ph):
        for b in range(pw):
            hit = indices.window_index == a * pw + b
            if hit.any():
                out += np.where(hit, g[..., a:a + sh * (hp - 1) + 1:sh, b:b + sw * (wp - 1) + 1:sw], 0.0)
    return out


def unpool(v, indices: PoolIndices):
    """Place each pooled value at its recorded position; zeros elsewhere."""
    vv = value_of(v)
    if vv.shape[-2:] != indices.window_index.shape[-2:]:
        raise DimensionError(f"unpool values {vv.shape} do not match indices {indices.window_index.shape}")
    return _emit(_scatter(vv, indices), (v,), lambda g: (_gather(g, indices),))


def gather_pooled(x, indices: PoolIndices) -> np.ndarray:
    """Read the input elements that a pooling step selected."""
    return _gather(value_of(x), indices)


# ---------------------------------------------------------------- gradient checking


def grad_check(f: Callable, point, eps: float = 1e-5, *, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` maps an array (or ``Var``) to a scalar built from this module's
    primitives.  The error per coordinate is
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    point = np.array(point, dtype=np.float64)
    tape = GradTape()
    v = tape.watch(point)
    out = f(v)
    if not isinstance(out, Var):
        # f ignores its argument: the gradient is identically zero
        analytic = np.zeros_like(point)
    else:
        analytic = tape.gradient(out, [v])[0]
    coords = np.arange(point.size)
    if max_coords is not None and point.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(point.size, size=max_coords, replace=False))
    worst = 0.0
    flat = point.reshape(-1)
    for i in coords:
        old = flat[i]
        flat[i] = old + eps
        up = float(value_of(f(point.copy())))
        flat[i] = old - eps
        down = float(value_of(f(point.copy())))
        flat[i] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite objective near coordinate {i}")
        numeric = (up - down) / (2 * eps)
        a = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst
