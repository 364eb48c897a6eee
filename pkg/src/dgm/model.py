"""The generative model: parameters, latent paths, rendering and the path prior."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .errors import CapacityError, ConfigError, DimensionError, FormatError

ENUMERATION_GUARD = 2**20

PLAIN, RES, DENSE = "plain", "res", "dense"


@dataclass(frozen=True)
class LayerSpec:
    """Structure of one rendering layer (counted from the image upward).

    ``channels`` is the number of new feature maps.  ``kind`` selects a plain
    layer, a residual layer (skip from ``skip_span`` layers below) or a dense
    layer whose features are concatenated with its input.
    """

    channels: int
    kernel: int | tuple[int, int] = 3
    padding: str | int = "valid"
    pool: int | tuple[int, int] = 1
    pool_stride: int | tuple[int, int] | None = None
    kind: str = PLAIN
    skip_span: int = 1

    def __post_init__(self):
        pool = nx._pair(self.pool)
        object.__setattr__(self, "kernel", nx._pair(self.kernel))
        object.__setattr__(self, "pool", pool)
        object.__setattr__(self, "pool_stride", pool if self.pool_stride is None else nx._pair(self.pool_stride))

    @property
    def kernel_hw(self):
        return nx._pair(self.kernel)

    @property
    def window(self):
        return nx._pair(self.pool)

    @property
    def stride(self):
        return nx._pair(self.pool if self.pool_stride is None else self.pool_stride)

    @property
    def n_window(self):
        ph, pw = self.window
        return ph * pw

    def to_dict(self):
        return {"channels": self.channels, "kernel": list(self.kernel_hw), "padding": self.padding,
                "pool": list(self.window), "pool_stride": list(self.stride), "kind": self.kind,
                "skip_span": self.skip_span}

    @classmethod
    def from_dict(cls, d):
        pad = d["padding"]
        if isinstance(pad, list):
            pad = tuple(tuple(p) for p in pad)
        return cls(d["channels"], tuple(d["kernel"]), pad, tuple(d["pool"]),
                   tuple(d["pool_stride"]), d["kind"], d["skip_span"])


@dataclass(frozen=True)
class Architecture:
    """Input shape, layer stack and class count, with derived layer shapes."""

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    n_classes: int
    leaky_slope: float = 0.0
    conv_shapes: tuple = field(init=False, repr=False)
    latent_shapes: tuple = field(init=False, repr=False)
    feature_shapes: tuple = field(init=False, repr=False)
    skip_shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.n_classes < 1:
            raise ConfigError("need at least one class")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ConfigError("leaky slope must lie in [0, 1)")
        feats = [self.input_shape]
        convs, lats, skips = [], [], []
        for ell, spec in enumerate(self.layers, start=1):
            c_in, h, w = feats[-1]
            kh, kw = spec.kernel_hw
            (pt, pb), (pl, pr) = nx.conv_padding(spec.padding, kh, kw)
            hc, wc = h + pt + pb - kh + 1, w + pl + pr - kw + 1
            if hc < 1 or wc < 1:
                raise DimensionError(f"layer {ell}: kernel {(kh, kw)} too large for {(h, w)}")
            hp, wp = nx.pooled_extent(hc, wc, spec.window, spec.stride)
            convs.append((spec.channels, hc, wc))
            lats.append((spec.channels, hp, wp))
            skip = None
            if spec.kind == RES:
                if spec.skip_span not in (1, 2) or ell - spec.skip_span < 0:
                    raise DimensionError(f"layer {ell}: bad skip span {spec.skip_span}")
                src = feats[ell - spec.skip_span]
                if src[1:] != (hc, wc):
                    raise DimensionError(f"layer {ell}: skip source {src} does not match conv output {(hc, wc)}")
                if spec.skip_span == 2 and self.layers[ell - 2].kind != PLAIN:
                    raise DimensionError(f"layer {ell}: two-layer skip must wrap a plain layer")
                skip = None if src[0] == spec.channels else (spec.channels, src[0], 1, 1)
            elif spec.kind == DENSE:
                if (hp, wp) != (h, w):
                    raise DimensionError(f"layer {ell}: dense layer must preserve spatial size {(h, w)}")
            elif spec.kind != PLAIN:
                raise ConfigError(f"unknown layer kind {spec.kind!r}")
            skips.append(skip)
            if spec.kind == DENSE:
                feats.append((spec.channels + c_in, hp, wp))
            else:
                feats.append((spec.channels, hp, wp))
        object.__setattr__(self, "conv_shapes", tuple(convs))
        object.__setattr__(self, "latent_shapes", tuple(lats))
        object.__setattr__(self, "feature_shapes", tuple(feats))
        object.__setattr__(self, "skip_shapes", tuple(skips))

    @property
    def depth(self):
        return len(self.layers)

    @property
    def top_shape(self):
        return self.feature_shapes[-1]

    def weight_shape(self, ell: int):
        spec = self.layers[ell - 1]
        return (spec.channels, self.feature_shapes[ell - 1][0]) + spec.kernel_hw

    def n_paths(self) -> int:
        """|L|: number of latent configurations (exact integer)."""
        count = 1
        for spec, shape in zip(self.layers, self.latent_shapes):
            count *= (2 * spec.n_window) ** int(np.prod(shape))
        return count

    def log_n_paths(self) -> float:
        return sum(int(np.prod(shape)) * math.log(2 * spec.n_window)
                   for spec, shape in zip(self.layers, self.latent_shapes))

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "n_classes": self.n_classes,
                "leaky_slope": self.leaky_slope, "layers": [s.to_dict() for s in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), tuple(LayerSpec.from_dict(s) for s in d["layers"]),
                   d["n_classes"], d.get("leaky_slope", 0.0))


def mnist_stack(width: float = 1.0, n_classes: int = 10, residual: bool = False,
                 dense: bool = False) -> Architecture:
    """The reference MNIST stack, with channel counts scaled by ``width``.

    conv 5x5 full -> pool 2 -> conv 3x3 valid -> conv 3x3 full -> pool 2 ->
    conv 3x3 valid.  ``residual`` turns the second 3x3 pair into a two-layer
    residual block; ``dense`` appends a same-size dense layer after it.
    """
    def ch(n):
        return max(1, int(round(n * width)))

    layers = [LayerSpec(ch(32), 5, "full", 2)]
    if residual:
        layers += [LayerSpec(ch(64), 3, "same"), LayerSpec(ch(64), 3, "same", 2, kind=RES, skip_span=2)]
    else:
        layers += [LayerSpec(ch(64), 3, "valid"), LayerSpec(ch(64), 3, "full", 2)]
    if dense:
        layers.append(LayerSpec(ch(16), 3, "same", kind=DENSE))
    layers.append(LayerSpec(ch(128), 3, "valid"))
    return Architecture((1, 28, 28), tuple(layers), n_classes)


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class DgmParams:
    """Every learned quantity of the model.

    Class priors are stored as unconstrained logits and mapped through a
    floored softmax, so ``class_priors`` always sums to one and never drops
    below ``prior_floor``.
    """

    arch: Architecture
    class_templates: np.ndarray
    weights: tuple
    biases: tuple
    skip_weights: tuple
    prior_logits: np.ndarray
    noise_sigma: float = 0.1
    prior_floor: float = 0.01

    def __post_init__(self):
        arch = self.arch
        object.__setattr__(self, "weights", tuple(self.weights))
        object.__setattr__(self, "biases", tuple(self.biases))
        object.__setattr__(self, "skip_weights", tuple(self.skip_weights))
        if nx.value_of(self.class_templates).shape != (arch.n_classes,) + arch.top_shape:
            raise DimensionError(f"class templates {nx.value_of(self.class_templates).shape} "
                                 f"!= {(arch.n_classes,) + arch.top_shape}")
        if len(self.weights) != arch.depth or len(self.biases) != arch.depth:
            raise DimensionError("one filter bank and bias vector per layer required")
        for ell in range(1, arch.depth + 1):
            if nx.value_of(self.weights[ell - 1]).shape != arch.weight_shape(ell):
                raise DimensionError(f"layer {ell} filters {nx.value_of(self.weights[ell - 1]).shape} "
                                     f"!= {arch.weight_shape(ell)}")
            if nx.value_of(self.biases[ell - 1]).shape != (arch.layers[ell - 1].channels,):
                raise DimensionError(f"layer {ell} bias shape {nx.value_of(self.biases[ell - 1]).shape}")
            want = arch.skip_shapes[ell - 1]
            got = self.skip_weights[ell - 1]
            if (want is None) != (got is None) or (got is not None and nx.value_of(got).shape != want):
                raise DimensionError(f"layer {ell} skip projection mismatch")
        if nx.value_of(self.prior_logits).shape != (arch.n_classes,):
            raise DimensionError("one prior logit per class required")
        if not self.noise_sigma > 0:
            raise ConfigError("noise sigma must be positive")
        if not 0 < self.prior_floor * arch.n_classes < 1 and arch.n_classes > 1:
            raise ConfigError("prior floor must satisfy 0 < K * floor < 1")

    @property
    def n_classes(self):
        return self.arch.n_classes

    @property
    def class_priors(self) -> np.ndarray:
        k = self.n_classes
        soft = nx.softmax_logits(nx.value_of(self.prior_logits))
        return self.prior_floor + (1.0 - k * self.prior_floor) * soft if k > 1 else np.ones(1)

    def log_priors(self):
        """Differentiable log class priors."""
        k = self.n_classes
        if k == 1:
            return np.zeros(1)
        soft = nx.exp(nx.log_softmax(self.prior_logits))
        return nx.log(nx.add(self.prior_floor, nx.mul(1.0 - k * self.prior_floor, soft)))

    def with_priors(self, priors) -> "DgmParams":
        pi = np.asarray(priors, dtype=np.float64)
        k = self.n_classes
        if pi.shape != (k,) or abs(pi.sum() - 1) > 1e-12 or np.any(pi < self.prior_floor):
            raise ConfigError("priors must be a distribution respecting the floor")
        if k == 1:
            return replace(self, prior_logits=np.zeros(1))
        with np.errstate(divide="ignore"):
            logits = np.log((pi - self.prior_floor) / (1.0 - k * self.prior_floor))
        return replace(self, prior_logits=logits)

    def groups(self) -> dict:
        """Named parameter arrays in declaration order."""
        out = {"class_templates": self.class_templates, "prior_logits": self.prior_logits}
        for ell in range(1, self.arch.depth + 1):
            out[f"weights.{ell}"] = self.weights[ell - 1]
            out[f"biases.{ell}"] = self.biases[ell - 1]
            if self.skip_weights[ell - 1] is not None:
                out[f"skip.{ell}"] = self.skip_weights[ell - 1]
        return out

    def with_groups(self, groups: dict) -> "DgmParams":
        d = self.arch.depth
        skips = [groups.get(f"skip.{ell}") if self.skip_weights[ell - 1] is not None else None
                 for ell in range(1, d + 1)]
        return replace(self, class_templates=groups["class_templates"],
                       prior_logits=groups["prior_logits"],
                       weights=tuple(groups[f"weights.{ell}"] for ell in range(1, d + 1)),
                       biases=tuple(groups[f"biases.{ell}"] for ell in range(1, d + 1)),
                       skip_weights=tuple(skips))

    def watched(self, tape: nx.GradTape) -> "DgmParams":
        """A copy whose arrays are tracked on ``tape``."""
        return self.with_groups({k: tape.watch(v) for k, v in self.groups().items()})


def init_params(arch: Architecture, rng: np.random.Generator, noise_sigma: float = 0.1,
                prior_floor: float = 0.01) -> DgmParams:
    """Templates drawn from N(0, 1/fan_in); zero biases; uniform class priors."""
    def normal(shape, fan_in):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

    weights, biases, skips = [], [], []
    for ell in range(1, arch.depth + 1):
        shape = arch.weight_shape(ell)
        weights.append(normal(shape, int(np.prod(shape[1:]))))
        biases.append(np.zeros(shape[0]))
        sk = arch.skip_shapes[ell - 1]
        skips.append(None if sk is None else normal(sk, sk[1]))
    top = arch.top_shape
    mu = normal((arch.n_classes,) + top, int(np.prod(top)))
    return DgmParams(arch, mu, weights, biases, skips, np.zeros(arch.n_classes), noise_sigma, prior_floor)


# ---------------------------------------------------------------- latents


@dataclass(frozen=True)
class LatentConfig:
    """One rendering path below the class, or a batch of them.

    ``s[l]`` holds the switch value (0 or the leaky slope when off, 1 when
    on) of every pooled pixel of layer ``l+1``; ``t[l]`` holds the chosen
    offset inside each pooling window.  A leading axis, when present,
    indexes a batch of paths.
    """

    s: tuple
    t: tuple

    def __post_init__(self):
        object.__setattr__(self, "s", tuple(np.asarray(v, dtype=np.float64) for v in self.s))
        object.__setattr__(self, "t", tuple(np.asarray(v, dtype=np.intp) for v in self.t))

    def __len__(self):
        return self.s[0].shape[0] if self.s else 1

    def batched(self, arch: Architecture) -> tuple["LatentConfig", bool]:
        if not self.s:
            return self, False
        single = self.s[0].ndim == len(arch.latent_shapes[0])
        if single:
            return LatentConfig(tuple(v[None] for v in self.s), tuple(v[None] for v in self.t)), True
        return self, False

    def __getitem__(self, i) -> "LatentConfig":
        return LatentConfig(tuple(v[i] for v in self.s), tuple(v[i] for v in self.t))

    def key(self) -> bytes:
        return b"".join(np.ascontiguousarray(v).tobytes() for v in self.s + self.t)

    def validate(self, arch: Architecture):
        if len(self.s) != arch.depth or len(self.t) != arch.depth:
            raise DimensionError("one switch map and one translation map per layer required")
        off = arch.leaky_slope
        for ell, (s, t) in enumerate(zip(self.s, self.t), start=1):
            shape = arch.latent_shapes[ell - 1]
            if s.shape[-3:] != shape or t.shape[-3:] != shape:
                raise DimensionError(f"layer {ell}: latent shape {s.shape} / {t.shape} != {shape}")
            if not np.all((s == 1.0) | (s == off)):
                raise DimensionError(f"layer {ell}: switch values must be {off} or 1")
            if np.any(t < 0) or np.any(t >= arch.layers[ell - 1].n_window):
                raise DimensionError(f"layer {ell}: translation index outside the pooling window")


@dataclass(frozen=True)
class RenderStack:
    """Rendered images ``h[0]`` (the image) up to ``h[L]`` (the class template)."""

    h: tuple
    batched: bool = True

    @property
    def image(self):
        return self.h[0]


def _as_labels(y, n: int) -> np.ndarray:
    ys = np.asarray(y, dtype=np.intp)
    if ys.ndim == 0:
        ys = np.full(n, int(ys), dtype=np.intp)
    if ys.shape != (n,):
        raise DimensionError(f"{ys.shape[0]} labels for {n} latent paths")
    return ys


def _indices(arch, ell, t):
    spec = arch.layers[ell - 1]
    return nx.PoolIndices(t, spec.window, spec.stride, arch.conv_shapes[ell - 1][1:])


def render(params: DgmParams, y, z: LatentConfig, stop: int = 0) -> RenderStack:
    """Top-down rendering h(L) = mu(y), h(l-1) = Lambda(z; l) h(l).

    Each step masks the pooled pixels by their switches, places them at the
    chosen window offsets (unpooling by index) and scatters one template per
    feature map (the adjoint of the inference convolution).  ``stop`` > 0
    ends the recursion early at ``h[stop]``.
    """
    arch = params.arch
    z.validate(arch)
    zb, single = z.batched(arch)
    n = len(zb) if zb.s else np.asarray(y).size
    ys = _as_labels(y, n)
    if np.any(ys < 0) or np.any(ys >= arch.n_classes):
        raise DimensionError(f"class index outside [0, {arch.n_classes})")
    depth = arch.depth
    h = [None] * (depth + 1)
    h[depth] = nx.take(params.class_templates, ys, axis=0)
    pending = {}
    for ell in range(depth, stop, -1):
        spec = arch.layers[ell - 1]
        top = h[ell]
        c = spec.channels
        new = top[:, :c] if spec.kind == DENSE else top
        active = nx.mul(zb.s[ell - 1], new)
        if spec.n_window > 1:
            active = nx.unpool(active, _indices(arch, ell, zb.t[ell - 1]))
        below = nx.conv_transpose(active, params.weights[ell - 1], spec.padding)
        if spec.kind == RES:
            proj = params.skip_weights[ell - 1]
            skip = active if proj is None else nx.conv_transpose(active, proj)
            if spec.skip_span == 1:
                below = nx.add(below, skip)
            else:
                pending[ell - 2] = skip
        elif spec.kind == DENSE:
            below = nx.add(below, top[:, c:])
        if ell - 1 in pending:
            below = nx.add(below, pending.pop(ell - 1))
        h[ell - 1] = below
    if single:
        h = [None if v is None else nx.getitem(v, 0) for v in h]
    return RenderStack(tuple(h), not single)


def eta(params: DgmParams, y, z: LatentConfig, stack: RenderStack | None = None):
    """eta(y, z) = sum over layers of <b(l), s(l) * h(l)> (per path when batched)."""
    arch = params.arch
    if stack is None:
        stack = render(params, y, z, stop=1)
    zb, single = z.batched(arch)
    total = 0.0
    for ell in range(1, arch.depth + 1):
        spec = arch.layers[ell - 1]
        h = stack.h[ell]
        if single:
            h = nx.reshape(h, (1,) + nx.value_of(h).shape)
        s = zb.s[ell - 1]
        new = h[:, :spec.channels] if spec.kind == DENSE else h
        if nx.value_of(new).shape[1:] != s.shape[1:]:
            raise DimensionError(f"layer {ell}: h {nx.value_of(new).shape} vs s {s.shape}")
        b = nx.reshape(params.biases[ell - 1], (1, spec.channels, 1, 1))
        total = nx.add(total, nx.total(nx.mul(nx.mul(b, s), new), axis=(1, 2, 3)))
    if single:
        return float(nx.value_of(total)[0]) if not isinstance(total, nx.Var) else nx.getitem(total, 0)
    return total


def min_rendered(stack: RenderStack) -> float:
    """Smallest entry of h(1)..h(L): the non-negativity monitor."""
    return float(min(nx.value_of(h).min() for h in stack.h[1:] if h is not None))


# ---------------------------------------------------------------- enumeration


def latent_grid(arch: Architecture, guard: int = ENUMERATION_GUARD) -> LatentConfig:
    """Every latent configuration as one batch, in a fixed mixed-radix order."""
    count = arch.n_paths()
    if count > guard:
        raise CapacityError(f"{count} latent configurations exceed the enumeration guard {guard}; "
                            "use the Gibbs sampler instead")
    index = np.arange(count, dtype=np.int64)
    s_maps, t_maps = [], []
    for spec, shape in zip(arch.layers, arch.latent_shapes):
        size = int(np.prod(shape))
        s = np.empty((count, size))
        t = np.empty((count, size), dtype=np.intp)
        for p in range(size):
            s[:, p] = np.where(index % 2 == 1, 1.0, arch.leaky_slope)
            index //= 2
        for p in range(size):
            t[:, p] = index % spec.n_window
            index //= spec.n_window
        s_maps.append(s.reshape((count,) + shape))
        t_maps.append(t.reshape((count,) + shape))
    return LatentConfig(tuple(s_maps), tuple(t_maps))


def enumerate_latents(params: DgmParams, guard: int = ENUMERATION_GUARD) -> Iterator[LatentConfig]:
    """Yield every latent configuration exactly once, in a fixed order."""
    grid = latent_grid(params.arch, guard)
    for i in range(grid.s[0].shape[0] if grid.s else 1):
        yield grid[i] if grid.s else grid


def prior_logits(params: DgmParams, y: int, guard: int = ENUMERATION_GUARD) -> np.ndarray:
    """eta(y, z) / sigma^2 for every enumerated z."""
    grid = latent_grid(params.arch, guard)
    if not grid.s:
        return np.zeros(1)
    return nx.value_of(eta(params, y, grid)) / params.noise_sigma**2


def prior(params: DgmParams, y: int, guard: int = ENUMERATION_GUARD) -> np.ndarray:
    """Exact pi(z | y) = softmax over z of eta(y, z) / sigma^2."""
    return nx.softmax_logits(prior_logits(params, y, guard))


# ---------------------------------------------------------------- sampling


def _site_list(arch):
    sites = []
    for ell, shape in enumerate(arch.latent_shapes, start=1):
        sites += [("s", ell, idx) for idx in np.ndindex(shape)]
    for ell, shape in enumerate(arch.latent_shapes, start=1):
        if arch.layers[ell - 1].n_window > 1:
            sites += [("t", ell, idx) for idx in np.ndindex(shape)]
    return sites


def sample_z_batch(params: DgmParams, y: int, rng: np.random.Generator, n_sweeps: int,
                   n_chains: int, init: LatentConfig | None = None) -> LatentConfig:
    """Run ``n_chains`` independent single-site Gibbs chains targeting pi(z | y).

    A sweep visits every switch site (all layers) and then every translation
    site; each site is redrawn from its exact conditional, computed from the
    eta values of all its candidate values with the rest of the path fixed.
    """
    if n_sweeps < 1:
        raise ConfigError("n_sweeps must be at least 1")
    arch = params.arch
    if init is None:
        s = [np.where(rng.random((n_chains,) + sh) < 0.5, 1.0, arch.leaky_slope) for sh in arch.latent_shapes]
        t = [rng.integers(0, spec.n_window, size=(n_chains,) + sh)
             for spec, sh in zip(arch.layers, arch.latent_shapes)]
    else:
        s = [v.copy() for v in init.s]
        t = [v.copy() for v in init.t]
    inv_var = 1.0 / params.noise_sigma**2
    sites = _site_list(arch)
    for _ in range(n_sweeps):
        for kind, ell, idx in sites:
            if kind == "s":
                values = np.array([arch.leaky_slope, 1.0])
            else:
                values = np.arange(arch.layers[ell - 1].n_window)
            m = len(values)
            cand_s = [np.repeat(v, m, axis=0) for v in s]
            cand_t = [np.repeat(v, m, axis=0) for v in t]
            target = (cand_s if kind == "s" else cand_t)[ell - 1]
            target[(slice(None),) + idx] = np.tile(values, n_chains)
            energy = nx.value_of(eta(params, y, LatentConfig(tuple(cand_s), tuple(cand_t)))).reshape(n_chains, m)
            probs = nx.softmax_logits(energy * inv_var, axis=1)
            u = rng.random(n_chains)
            pick = np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1), m - 1)
            chosen = values[pick]
            (s if kind == "s" else t)[ell - 1][(slice(None),) + idx] = chosen
    return LatentConfig(tuple(s), tuple(t))


def sample_z(params: DgmParams, y: int, rng: np.random.Generator, n_sweeps: int = 10) -> LatentConfig:
    """One Gibbs draw of z given y, returned after ``n_sweeps`` sweeps."""
    return sample_z_batch(params, y, rng, n_sweeps, 1)[0]


def sample_image(params: DgmParams, y: int, z: LatentConfig, rng: np.random.Generator,
                 sigma: float | None = None) -> np.ndarray:
    """Render (y, z) and add iid Gaussian pixel noise of scale sigma."""
    sigma = params.noise_sigma if sigma is None else sigma
    h0 = nx.value_of(render(params, y, z).image)
    return h0 + sigma * rng.standard_normal(h0.shape)


def sample_images(params: DgmParams, y: int, count: int, seed: int, n_sweeps: int = 10,
                  sigma: float | None = None) -> list[np.ndarray]:
    """Generate ``count`` images of class ``y``; draw ``i`` uses seed ``seed + i``."""
    out = []
    for i in range(count):
        rng = np.random.default_rng(seed + i)
        z = sample_z(params, y, rng, n_sweeps)
        out.append(sample_image(params, y, z, rng, sigma))
    return out


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"DGMCKPT\x00"
_VERSION = 1


def _blocks(params: DgmParams):
    yield "scalars", np.array([params.noise_sigma, params.prior_floor])
    for name, arr in params.groups().items():
        yield name, np.asarray(arr, dtype=np.float64)


def dumps_params(params: DgmParams) -> bytes:
    """Serialise: magic, version, JSON header, shape table, little-endian f64 blocks."""
    blocks = list(_blocks(params))
    header = json.dumps({"arch": params.arch.to_dict(), "blocks": [n for n, _ in blocks]}).encode()
    out = io.BytesIO()
    out.write(_MAGIC)
    out.write(struct.pack("<II", _VERSION, len(header)))
    out.write(header)
    out.write(struct.pack("<I", len(blocks)))
    for _, arr in blocks:
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in blocks:
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def loads_params(data: bytes) -> DgmParams:
    buf = io.BytesIO(data)

    def read(n):
        chunk = buf.read(n)
        if len(chunk) != n:
            raise FormatError("checkpoint truncated")
        return chunk

    if read(8) != _MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", read(8))
    if version != _VERSION:
        raise FormatError(f"checkpoint version {version}, expected {_VERSION}")
    header = json.loads(read(hlen).decode())
    (count,) = struct.unpack("<I", read(4))
    names = header["blocks"]
    if count != len(names):
        raise FormatError("shape table does not match header")
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", read(4))
        shapes.append(struct.unpack(f"<{ndim}I", read(4 * ndim)))
    arrays = {}
    for name, shape in zip(names, shapes):
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(read(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint payload")
    arch = Architecture.from_dict(header["arch"])
    sigma, floor = arrays.pop("scalars")
    template = init_params(arch, np.random.default_rng(0))
    params = replace(template, noise_sigma=float(sigma), prior_floor=float(floor))
    return params.with_groups(arrays)


def save_params(params: DgmParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_params(params))


def load_params(path) -> DgmParams:
    with open(path, "rb") as fh:
        return loads_params(fh.read())
