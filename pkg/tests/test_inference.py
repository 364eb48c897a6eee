import numpy as np
import pytest

from dgm import inference as inf
from dgm.errors import DimensionError, FormatError
from dgm.micro import random_micro_params
from dgm.model import (DENSE, PLAIN, RES, Architecture, DgmParams, LayerSpec, eta,
                       latent_grid, render)

from oracles import hand_params, one_layer


def scores_by_enumeration(params, x):
    """max over z of h(y, z; 0)^T x + eta(y, z) for each class."""
    grid = latent_grid(params.arch)
    xf = x.reshape(-1)
    out = []
    for y in range(params.n_classes):
        stack = render(params, y, grid)
        h = np.asarray(stack.image).reshape(len(grid), -1)
        out.append(np.max(h @ xf + eta(params, y, grid, stack)))
    return np.array(out)


def test_zero_input_nonpositive_bias_gives_zero_features():
    params = random_micro_params(np.random.default_rng(0), depth=2)
    groups = params.groups()
    for ell in (1, 2):
        groups[f"biases.{ell}"] = -np.abs(groups[f"biases.{ell}"])
    params = params.with_groups(groups)
    trace = inf.forward(params, np.zeros(params.arch.input_shape))
    assert np.all(trace.activations[-1] == 0)
    assert np.all(trace.class_scores == 0)


def test_identity_network_is_relu():
    params = hand_params(one_layer(in_shape=(1, 3, 3)), np.ones((1, 1, 3, 3)), [np.ones((1, 1, 1, 1))], [[0.0]])
    x = np.random.default_rng(1).normal(size=(1, 3, 3))
    np.testing.assert_array_equal(inf.forward(params, x).activations[-1][0], np.maximum(x, 0))


def test_switches_mark_positive_preactivations():
    params = hand_params(one_layer(in_shape=(1, 1, 3)), np.ones((1, 1, 1, 3)), [np.ones((1, 1, 1, 1))], [[0.0]])
    trace = inf.forward(params, np.array([[[-1.0, 0.0, 2.0]]]))
    np.testing.assert_array_equal(trace.switches[0][0, 0, 0], [0.0, 0.0, 1.0])


def test_argmax_class():
    fake = inf.InferenceTrace((), (), (), None, np.array([[1.0, 2.0, 0.5]]), batched=False)
    assert inf.jmap_latents(fake)[0] == 1
    single = random_micro_params(np.random.default_rng(2), n_classes=1)
    x = np.random.default_rng(3).uniform(size=(5,) + single.arch.input_shape)
    assert np.all(inf.jmap_latents(inf.forward(single, x))[0] == 0)


def test_posterior_uniform_for_identical_classes():
    params = random_micro_params(np.random.default_rng(4), n_classes=3)
    mu = np.repeat(params.class_templates[:1], 3, axis=0)
    params = params.with_groups({**params.groups(), "class_templates": mu}).with_priors(np.full(3, 1 / 3))
    q = inf.posterior(params, np.random.default_rng(5).uniform(size=params.arch.input_shape))
    np.testing.assert_allclose(q, 1 / 3, rtol=1e-12)


def test_posterior_approaches_prior_with_large_sigma():
    params = random_micro_params(np.random.default_rng(6), n_classes=3, sigma=1e8)
    q = inf.posterior(params, np.ones(params.arch.input_shape), sigma_scaled=True)
    np.testing.assert_allclose(q, params.class_priors, rtol=1e-9)


def test_input_shape_mismatch():
    params = random_micro_params(np.random.default_rng(7))
    with pytest.raises(DimensionError):
        inf.forward(params, np.zeros((2, 9, 9, 9)))


def test_forward_batch_matches_single():
    params = random_micro_params(np.random.default_rng(8), kinds=(PLAIN, RES, DENSE), depth=2)
    x = np.random.default_rng(9).normal(size=(4,) + params.arch.input_shape)
    batch = inf.forward(params, x)
    for i in range(4):
        single = inf.forward(params, x[i])
        np.testing.assert_allclose(batch.logits[i], single.logits[0], rtol=1e-13, atol=1e-13)


# ---------------------------------------------------------------- max-product duality


def test_class_scores_equal_enumerated_maximum():
    rng = np.random.default_rng(10)
    for _ in range(30):
        params = random_micro_params(rng, max_paths=2048)
        x = rng.normal(size=params.arch.input_shape)
        trace = inf.forward(params, x)
        np.testing.assert_allclose(trace.class_scores[0], scores_by_enumeration(params, x), atol=1e-9)


def test_cnn_path_achieves_its_score_for_signed_models():
    rng = np.random.default_rng(11)
    for _ in range(30):
        params = random_micro_params(rng, nonnegative=False)
        x = rng.normal(size=params.arch.input_shape)
        trace = inf.forward(params, x)
        _, z = inf.jmap_latents(trace)
        best = scores_by_enumeration(params, x)
        for y in range(params.n_classes):
            stack = render(params, y, z)
            own = float(np.sum(stack.image * x)) + eta(params, y, z, stack)
            assert own == pytest.approx(trace.class_scores[0, y], abs=1e-9)
            assert best[y] >= own - 1e-9


def test_max_eta_matches_enumeration_for_nonnegative_models():
    rng = np.random.default_rng(12)
    for _ in range(20):
        params = random_micro_params(rng)
        grid = latent_grid(params.arch)
        want = [np.max(eta(params, y, grid)) for y in range(params.n_classes)]
        np.testing.assert_allclose(inf.max_eta_by_class(params), want, atol=1e-10)


# ---------------------------------------------------------------- min branch


def test_min_branch_is_negated_max_branch_of_sign_flipped_model():
    rng = np.random.default_rng(13)
    for _ in range(50):
        params = random_micro_params(rng, kinds=(PLAIN, DENSE), nonnegative=False)
        x = rng.normal(size=(3,) + params.arch.input_shape)
        groups = dict(params.groups())
        groups["weights.1"] = -groups["weights.1"]
        groups["class_templates"] = -groups["class_templates"]
        for ell in range(1, params.arch.depth + 1):
            groups[f"biases.{ell}"] = -groups[f"biases.{ell}"]
        flipped = params.with_groups(groups)
        low = inf.forward(params, x, branch="min")
        high = inf.forward(flipped, x)
        for a, b in zip(low.activations[1:], high.activations[1:]):
            np.testing.assert_array_equal(a, -b)
        np.testing.assert_array_equal(low.class_scores, high.class_scores)
        for a, b in zip(low.offsets, high.offsets):
            np.testing.assert_array_equal(a, b)


def test_unknown_branch():
    params = random_micro_params(np.random.default_rng(14))
    with pytest.raises(ValueError):
        inf.forward(params, np.zeros(params.arch.input_shape), branch="median")


# ---------------------------------------------------------------- reconstruction


def test_reconstruct_zero_input_zero_bias():
    params = random_micro_params(np.random.default_rng(15), bias_scale=0.0)
    assert np.all(inf.reconstruct(params, np.zeros(params.arch.input_shape)) == 0)


def test_reconstruct_is_invariant_to_positive_scaling_without_bias():
    # with zero biases the argmax latents ignore positive scaling, and the render depends on x only through them
    rng = np.random.default_rng(16)
    params = random_micro_params(rng, bias_scale=0.0, nonnegative=False)
    x = rng.normal(size=params.arch.input_shape)
    base = inf.reconstruct(params, x, 0)
    for alpha in (0.5, 2.0, 7.0):
        np.testing.assert_array_equal(inf.reconstruct(params, alpha * x, 0), base)


def test_reconstruct_uses_argmax_class_by_default():
    rng = np.random.default_rng(17)
    params = random_micro_params(rng, n_classes=3)
    x = rng.normal(size=params.arch.input_shape)
    y = int(np.argmax(inf.forward(params, x).logits))
    np.testing.assert_array_equal(inf.reconstruct(params, x), inf.reconstruct(params, x, y))


# ---------------------------------------------------------------- residual, dense and normalisation


def test_residual_with_zero_filters_is_pure_skip():
    arch = Architecture((2, 3, 3), (LayerSpec(2, 1, "valid"), LayerSpec(2, 3, "same", kind=RES)), 1)
    params = DgmParams(arch, np.ones((1, 2, 3, 3)), [np.eye(2).reshape(2, 2, 1, 1), np.zeros((2, 2, 3, 3))],
                       [np.zeros(2), np.zeros(2)], [None, None], np.zeros(1))
    x = np.random.default_rng(18).uniform(size=(2, 3, 3))
    trace = inf.res_forward(params, x)
    np.testing.assert_array_equal(trace.activations[2], trace.activations[1])
    with pytest.raises(DimensionError):
        inf.dense_forward(params, x)


def test_dense_layer_concatenates_input():
    params = random_micro_params(np.random.default_rng(19), kinds=(DENSE,), depth=2)
    x = np.random.default_rng(20).uniform(size=params.arch.input_shape)
    trace = inf.dense_forward(params, x)
    c = params.arch.layers[1].channels
    np.testing.assert_array_equal(trace.activations[2][:, c:], trace.activations[1])


def test_batchnorm_definitions():
    x = np.random.default_rng(21).normal(3.0, 2.0, size=(8, 3, 4, 4))
    out = inf.batchnorm_layer(x, eps=0.0)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-6)
    shift = np.array([1.0, -2.0, 0.5])
    const = inf.batchnorm_layer(np.full((4, 3, 2, 2), 7.0), 1.0, shift)
    np.testing.assert_array_equal(const, np.broadcast_to(shift[None, :, None, None], (4, 3, 2, 2)))


# ---------------------------------------------------------------- PGM


def test_pgm_roundtrip(tmp_path):
    img = np.linspace(-0.5, 1.5, 12).reshape(1, 3, 4)
    inf.write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    np.testing.assert_array_equal(inf.read_pgm(tmp_path / "a.pgm") * 255, inf.to_gray8(img))


def test_pgm_rejects_other_formats(tmp_path):
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(FormatError):
        inf.read_pgm(tmp_path / "b.pgm")
    with pytest.raises(DimensionError):
        inf.write_pgm(tmp_path / "c.pgm", np.zeros((3, 2, 2)))
