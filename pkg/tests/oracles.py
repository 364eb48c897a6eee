"""Independent reference implementations used by the test suite."""

import numpy as np

from dgm.model import Architecture, DgmParams, LayerSpec


def hand_params(arch, mu, weights, biases, sigma=1.0, priors=None, floor=0.01):
    """Parameters from explicit arrays (plain layers only)."""
    params = DgmParams(arch, np.asarray(mu, float), [np.asarray(w, float) for w in weights],
                       [np.asarray(b, float) for b in biases], [None] * arch.depth,
                       np.zeros(arch.n_classes), sigma, floor)
    return params if priors is None else params.with_priors(priors)


def one_layer(channels=1, in_shape=(1, 1, 1), kernel=1, pool=1, n_classes=1, leaky=0.0):
    return Architecture(in_shape, (LayerSpec(channels, kernel, "valid", pool),), n_classes, leaky)


def layer_matrix(params, ell, s, t):
    """Lambda(z; l) assembled entry by entry for a plain valid-padding layer."""
    arch = params.arch
    spec = arch.layers[ell - 1]
    w = np.asarray(params.weights[ell - 1])
    c_out, hp, wp = arch.latent_shapes[ell - 1]
    c_in, h_in, w_in = arch.feature_shapes[ell - 1]
    kh, kw = spec.kernel_hw
    sh, sw = spec.stride
    _, pw = spec.window
    m = np.zeros((c_in * h_in * w_in, c_out * hp * wp))
    for c in range(c_out):
        for i in range(hp):
            for j in range(wp):
                col = (c * hp + i) * wp + j
                r0 = i * sh + t[c, i, j] // pw
                q0 = j * sw + t[c, i, j] % pw
                for ci in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            row = (ci * h_in + r0 + a) * w_in + q0 + b
                            m[row, col] += s[c, i, j] * w[c, ci, a, b]
    return m


def render_by_matrices(params, y, z):
    """h(0) ... h(L) as flat vectors from explicit matrix products."""
    depth = params.arch.depth
    h = [None] * (depth + 1)
    h[depth] = np.asarray(params.class_templates[y]).reshape(-1)
    for ell in range(depth, 0, -1):
        h[ell - 1] = layer_matrix(params, ell, z.s[ell - 1], z.t[ell - 1]) @ h[ell]
    return h


def eta_by_matrices(params, y, z):
    h = render_by_matrices(params, y, z)
    total = 0.0
    for ell in range(1, params.arch.depth + 1):
        shape = params.arch.latent_shapes[ell - 1]
        b = np.broadcast_to(np.asarray(params.biases[ell - 1])[:, None, None], shape)
        total += float(np.sum(b * z.s[ell - 1] * h[ell].reshape(shape)))
    return total


def band_ok(counts, probs, width=3.0):
    """Per-cell check that counts lie within ``width`` multinomial standard deviations."""
    n = counts.sum()
    sd = np.sqrt(n * probs * (1 - probs))
    return np.abs(counts - n * probs) <= width * sd + 1e-12
