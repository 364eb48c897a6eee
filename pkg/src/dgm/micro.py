"""Small random models whose latent paths can be enumerated exhaustively."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import DimensionError, NumericError
from .inference import forward, jmap_latents
from .model import DENSE, PLAIN, RES, Architecture, DgmParams, LayerSpec, render

_POOLS = [(1, 1), (2, 2), (1, 2), (2, 1)]


def micro_architecture(n_classes: int = 2) -> Architecture:
    """Fixed two-layer toy stack used by the command line ``micro`` option."""
    return Architecture((1, 6, 6), (LayerSpec(4, 3, "valid", 2), LayerSpec(4, 2, "valid")), n_classes)


def random_micro_arch(rng: np.random.Generator, max_paths: int = 2**14, depth: int | None = None,
                      n_classes: int | None = None, kinds: tuple = (PLAIN,),
                      leaky_slope: float = 0.0) -> Architecture:
    """Draw a random enumerable architecture with at most ``max_paths`` paths."""
    for _ in range(10_000):
        d = depth or int(rng.integers(1, 3))
        k = n_classes or int(rng.integers(1, 4))
        c0 = int(rng.integers(1, 3))
        h0, w0 = (int(v) for v in rng.integers(1, 5, size=2))
        layers = []
        for ell in range(d):
            kind = PLAIN if ell == 0 else kinds[int(rng.integers(len(kinds)))]
            ch = int(rng.integers(1, 3))
            if kind == PLAIN:
                layers.append(LayerSpec(ch, int(rng.integers(1, 3)), "valid", _POOLS[int(rng.integers(4))]))
            elif kind == RES:
                layers.append(LayerSpec(ch, int(rng.choice([1, 3])), "same",
                                        _POOLS[int(rng.integers(4))], kind=RES))
            else:
                layers.append(LayerSpec(ch, int(rng.choice([1, 3])), "same", kind=DENSE))
        try:
            arch = Architecture((c0, h0, w0), tuple(layers), k, leaky_slope)
        except DimensionError:
            continue
        if 2 <= arch.n_paths() <= max_paths:
            return arch
    raise RuntimeError("could not draw a micro architecture")


def random_micro_params(rng: np.random.Generator, arch: Architecture | None = None,
                        nonnegative: bool = True, sigma: float | None = None,
                        prior_floor: float = 0.01, bias_scale: float = 0.5,
                        **arch_kw) -> DgmParams:
    """Random parameters; ``nonnegative`` keeps every rendered layer h(l), l >= 1, >= 0.

    Non-negativity follows from non-negative class templates and non-negative
    filters above the first layer (the first layer's filters stay signed).
    """
    if arch is None:
        arch = random_micro_arch(rng, **arch_kw)

    def draw(shape, signed):
        return rng.normal(0.0, 1.0, size=shape) if signed else rng.uniform(0.05, 1.0, size=shape)

    weights, biases, skips = [], [], []
    for ell in range(1, arch.depth + 1):
        weights.append(draw(arch.weight_shape(ell), ell == 1 or not nonnegative))
        biases.append(rng.normal(0.0, bias_scale, size=arch.layers[ell - 1].channels))
        sk = arch.skip_shapes[ell - 1]
        skips.append(None if sk is None else draw(sk, not nonnegative))
    mu = draw((arch.n_classes,) + arch.top_shape, not nonnegative)
    k = arch.n_classes
    sigma = float(rng.choice([0.5, 1.0, 2.0])) if sigma is None else sigma
    params = DgmParams(arch, mu, weights, biases, skips, np.zeros(k), sigma, prior_floor)
    if k > 1:
        params = params.with_priors(prior_floor + (1 - k * prior_floor) * rng.dirichlet(np.full(k, 2.0)))
    return params


def gradcheck_case(seed: int, n: int = 4):
    """A leaky micro-model and batch whose activation and rendering variances stay well above the floor."""
    rng = np.random.default_rng(seed)
    for _ in range(200):
        params = random_micro_params(rng, kinds=(PLAIN, RES, DENSE), nonnegative=False, leaky_slope=0.1)
        x = rng.uniform(0.0, 1.0, size=(3 * n,) + params.arch.input_shape)
        trace = forward(params, x)
        yy, z = jmap_latents(trace)
        stack = render(params, yy, z)
        spread = min(min(nx.value_of(trace.activations[l]).var(0).min(), nx.value_of(stack.h[l]).var(0).min())
                     for l in range(1, params.arch.depth + 1))
        if spread > 1e-3:
            y = rng.integers(0, params.n_classes, size=n)
            return params, x[:n], y, x[n:]
    raise NumericError("could not draw a well-conditioned gradient-check case")
