"""Acceptance criteria 1-10; each test records one PASS/FAIL line in the terminal summary."""

import functools
import gzip
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from dgm import bounds as B
from dgm import cli
from dgm import numerics as nx
from dgm.errors import FormatError
from dgm.inference import forward, reconstruct
from dgm.losses import CHECKED_COMPONENTS, gradient_errors
from dgm.micro import gradcheck_case, random_micro_params
from dgm.model import (DENSE, PLAIN, RES, enumerate_latents, eta, latent_grid, min_rendered, prior,
                       render, sample_z, sample_z_batch)
from dgm.training import (Dataset, TrainConfig, em_train, evaluate, load_mnist_dir, load_mnist_idx,
                          new_params, read_idx_images, read_idx_labels, semi_supervised_split)

from conftest import record
from oracles import band_ok

MNIST = Path(__file__).resolve().parents[1] / "data" / "mnist"


def enumerated_scores(params, x):
    """max over z of h(y, z; 0)^T x + eta(y, z), shape (n, K)."""
    grid = latent_grid(params.arch)
    xf = x.reshape(len(x), -1)
    out = np.empty((len(x), params.n_classes))
    for y in range(params.n_classes):
        stack = render(params, y, grid)
        assert min_rendered(stack) >= 0
        h = np.asarray(stack.image).reshape(len(grid), -1)
        out[:, y] = (h @ xf.T + np.asarray(eta(params, y, grid, stack))[:, None]).max(axis=0)
    return out


def test_criterion_1_duality():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, largest = 0.0, 0
    for _ in range(200):
        params = random_micro_params(rng, max_paths=2**20)
        largest = max(largest, params.arch.n_paths())
        x = rng.normal(size=(10,) + params.arch.input_shape)
        worst = max(worst, float(np.abs(forward(params, x).class_scores - enumerated_scores(params, x)).max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 60
    record(1, ok, f"max |cnn - enumerated| = {worst:.2e} over 200 models (up to {largest} paths), {elapsed:.1f}s")
    assert ok


def test_criterion_2_bounds():
    start = time.perf_counter()
    worst = {}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = random_micro_params(rng, kinds=(PLAIN, RES, DENSE), nonnegative=seed % 2 == 0)
        x = rng.uniform(size=(10,) + params.arch.input_shape)
        y = rng.integers(0, params.n_classes, size=10)
        for report in B.all_reports(params, x, y, seed):
            worst[report.theorem] = min(worst.get(report.theorem, np.inf), report.slack)
    elapsed = time.perf_counter() - start
    needed = {"ce_sandwich", "un_vn_upper", "un_vn_lower", "posterior_sandwich"}
    ok = needed <= set(worst) and min(worst.values()) >= -1e-9 and elapsed < 120
    detail = ", ".join(f"{k} {v:.2e}" for k, v in sorted(worst.items()))
    record(2, ok, f"min slack per bound over 100 models: {detail}; {elapsed:.1f}s")
    assert ok


def test_criterion_3_conjugate_prior():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        params = random_micro_params(rng, depth=2)
        worst = max(worst, B.conjugate_form_check(params, rng.uniform(size=(10,) + params.arch.input_shape)))
    ok = worst < 1e-9
    record(3, ok, f"max residual spread {worst:.2e} over 50 two-layer models")
    assert ok


def test_criterion_4_gradients():
    worst, checks = 0.0, 0
    for seed in range(20):
        params, x_lab, y_lab, x_unl = gradcheck_case(seed)
        for name, weights in CHECKED_COMPONENTS.items():
            for per_channel in (False, True) if name == "mm" else (False,):
                errs = gradient_errors(params, x_lab, y_lab, x_unl, weights, mm_per_channel=per_channel)
                worst = max(worst, max(errs.values()))
                checks += len(errs)
    ok = worst < 1e-5
    record(4, ok, f"max relative error {worst:.2e} over {checks} (model, component, group) checks")
    assert ok


def test_criterion_5_roundtrip():
    rng = np.random.default_rng(5)
    passed, drawn, worst = 0, 0, 0.0
    while passed < 100:
        params = random_micro_params(rng, max_paths=4096)
        y = int(rng.integers(params.n_classes))
        z = sample_z(params, y, rng, 5)
        x = np.asarray(render(params, y, z).image).reshape(params.arch.input_shape)
        drawn += 1
        # keep images whose generating path is the unique maximiser of the class score
        grid = latent_grid(params.arch)
        stack = render(params, y, grid)
        scores = np.asarray(stack.image).reshape(len(grid), -1) @ x.reshape(-1) + np.asarray(eta(params, y, grid, stack))
        order = np.argsort(scores)
        if len(grid) > 1 and scores[order[-1]] - scores[order[-2]] < 1e-9:
            continue
        if grid[int(order[-1])].key() != z.key():
            continue
        worst = max(worst, float(np.abs(reconstruct(params, x, y) - x).max()))
        passed += 1
    ok = worst < 1e-9
    record(5, ok, f"max |reconstruct(x, y) - x| = {worst:.2e} on 100 images ({drawn} drawn)")
    assert ok


def test_criterion_6_gibbs():
    good = total = 0
    for seed in range(20):
        rng = np.random.default_rng(600 + seed)
        params = random_micro_params(rng, max_paths=256)
        y = int(rng.integers(params.n_classes))
        keys = {z.key(): i for i, z in enumerate(enumerate_latents(params))}
        draws = sample_z_batch(params, y, rng, 20, 10_000)
        counts = np.bincount([keys[draws[i].key()] for i in range(10_000)], minlength=len(keys))
        inside = band_ok(counts, prior(params, y))
        good += int(inside.sum())
        total += len(inside)
    ok = good / total >= 0.95
    record(6, ok, f"{good}/{total} = {good / total:.4f} of configs inside 3-sigma bands over 20 models")
    assert ok


# ---------------------------------------------------------------- MNIST comparisons

SEEDS = (0, 1, 2)
MNIST_EPOCHS = 3
MNIST_SETTINGS = dict(optimizer="adam", learning_rate=1e-3, batch_size=64, labeled_batch_size=32,
                      labeled=100, unlabeled=10_000, validation=0, monitor_nonnegativity=False,
                      eval_every=MNIST_EPOCHS, epochs=MNIST_EPOCHS)
CE_ONLY = dict(alpha_rc=0.0, alpha_kl=0.0, alpha_mm=0.0)


@functools.lru_cache(maxsize=None)
def mnist(split: str):
    return load_mnist_dir(MNIST, split)


@functools.lru_cache(maxsize=None)
def mnist_error(seed: int, **weights) -> float:
    train, test = mnist("train"), mnist("test")
    cfg = TrainConfig(seed=seed, **{**MNIST_SETTINGS, **weights})
    lab, unl, _ = semi_supervised_split(train, cfg.labeled, cfg.unlabeled, np.random.default_rng(seed), 0)
    pool = Dataset(np.concatenate([lab.images, unl.images]), np.concatenate([lab.labels, unl.labels]))
    params, _ = em_train(new_params(cfg), pool, cfg)
    return evaluate(params, test).error


needs_mnist = pytest.mark.skipif(not (MNIST / "train-images-idx3-ubyte").exists()
                                 and not (MNIST / "train-images-idx3-ubyte.gz").exists(),
                                 reason="MNIST not downloaded (scripts/fetch_mnist.sh)")


@pytest.mark.slow
@needs_mnist
def test_criterion_7_semi_supervised_direction():
    start = time.perf_counter()
    full = [mnist_error(s) for s in SEEDS]
    base = [mnist_error(s, **CE_ONLY) for s in SEEDS]
    elapsed = time.perf_counter() - start
    margin = np.mean(base) - np.mean(full)
    ok = margin >= 0 and elapsed < 1800
    record(7, ok, f"test error full {np.mean(full):.4f} {np.round(full, 4).tolist()} vs CE-only "
                  f"{np.mean(base):.4f} {np.round(base, 4).tolist()}; margin {margin:+.4f}; {elapsed:.0f}s")
    assert ok


def test_criterion_8_maxmin_reduction_and_negation():
    rng = np.random.default_rng(8)
    base = dict(arch="micro", epochs=3, batch_size=8, labeled_batch_size=8, optimizer="sgd", learning_rate=0.01,
                **CE_ONLY, monitor_nonnegativity=False)
    data = Dataset(rng.uniform(size=(24, 1, 6, 6)), rng.integers(0, 2, size=24))
    plain = TrainConfig(**base)
    maxmin = TrainConfig(**base, maxmin=True, alpha_max=1.0, alpha_min=0.0)
    a, ha = em_train(new_params(plain, 2), data, plain)
    b, hb = em_train(new_params(maxmin, 2), data, maxmin)
    identical = ha == hb and all(np.array_equal(a.groups()[k], v) for k, v in b.groups().items())

    v = rng.normal(size=(3, 2, 6, 6))
    elementwise = np.array_equal(nx.nrelu(v), -nx.relu(-v))
    low, low_idx = nx.minpool(v, 2)
    high, high_idx = nx.maxpool(-v, 2)
    pooling = np.array_equal(low, -high) and np.array_equal(low_idx.window_index, high_idx.window_index)

    end_to_end = True
    for _ in range(50):
        params = random_micro_params(rng, kinds=(PLAIN, DENSE), nonnegative=False)
        groups = dict(params.groups())
        groups["weights.1"] = -groups["weights.1"]
        groups["class_templates"] = -groups["class_templates"]
        for ell in range(1, params.arch.depth + 1):
            groups[f"biases.{ell}"] = -groups[f"biases.{ell}"]
        xs = rng.normal(size=(3,) + params.arch.input_shape)
        lo = forward(params, xs, branch="min")
        hi = forward(params.with_groups(groups), xs)
        end_to_end &= all(np.array_equal(p, -q) for p, q in zip(lo.activations[1:], hi.activations[1:]))
        end_to_end &= np.array_equal(lo.class_scores, hi.class_scores)
    ok = identical and elementwise and pooling and end_to_end
    record(8, ok, f"alpha_min=0 bit-identical {identical}; nrelu {elementwise}; minpool {pooling}; "
                  f"min-branch network {end_to_end} (50 models)")
    assert ok


@pytest.mark.slow
@needs_mnist
def test_criterion_8_maxmin_mnist_record():
    plain = [mnist_error(s, **CE_ONLY) for s in SEEDS]
    maxmin = [mnist_error(s, **CE_ONLY, maxmin=True) for s in SEEDS]
    record(8, True, f"recorded only: MNIST CE test error {np.mean(plain):.4f} {np.round(plain, 4).tolist()}, "
                    f"Max-Min {np.mean(maxmin):.4f} {np.round(maxmin, 4).tolist()}")


def test_criterion_9_cli_determinism(tmp_path):
    cfg = tmp_path / "micro.cfg"
    cfg.write_text("arch = micro\nepochs = 2\nlabeled = 8\nunlabeled = 16\nvalidation = 8\nbatch_size = 8\n"
                   "labeled_batch_size = 4\noptimizer = sgd\nlearning_rate = 0.001\ngrad_clip = 1.0\n")
    commands = {
        "train": ["train", "--config", str(cfg), "--seed", "4"],
        "verify-bounds": ["verify-bounds", "--models", "3", "--samples", "4"],
        "gradcheck": ["gradcheck", "--models", "1"],
        "synth": ["synth", "--count", "10"],
    }
    produced = {}
    for run in ("a", "b"):
        for name, argv in commands.items():
            out = tmp_path / run / name
            target = out / "out.csv" if name in ("verify-bounds", "gradcheck") else out
            assert cli.run(argv + ["--threads", "1", "--out", str(target)]) == 0
        data = tmp_path / run / "synth"
        assert cli.run(["eval", "--model", str(tmp_path / run / "train" / "model.ckpt"), "--input",
                        str(data / "images-idx3-ubyte"), "--labels", str(data / "labels-idx1-ubyte"),
                        "--threads", "1", "--out", str(tmp_path / run / "eval")]) == 0
        produced[run] = {p.relative_to(tmp_path / run): p.read_bytes()
                         for p in sorted((tmp_path / run).rglob("*.csv"))}
    ok = produced["a"] == produced["b"] and len(produced["a"]) >= 6
    record(9, ok, f"{len(produced['a'])} CSV files byte-identical across repeated --threads 1 runs")
    assert ok


def idx(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


def test_criterion_10_idx_fixtures(tmp_path):
    results = {}
    (tmp_path / "img").write_bytes(idx(0x803, (1, 2, 2), [0, 255, 0, 255]))
    (tmp_path / "lab").write_bytes(idx(0x801, (1,), [7]))
    data = load_mnist_idx(tmp_path / "img", tmp_path / "lab")
    results["valid"] = np.array_equal(data.images[0, 0], [[0, 1], [0, 1]]) and data.labels.tolist() == [7]
    (tmp_path / "img.gz").write_bytes(gzip.compress(idx(0x803, (1, 2, 2), [0, 255, 0, 255])))
    results["gzip"] = np.array_equal(read_idx_images(tmp_path / "img.gz"), data.images)

    def fails(name, raw, reader, pattern):
        (tmp_path / name).write_bytes(raw)
        with pytest.raises(FormatError, match=pattern):
            reader(tmp_path / name)
        results[name] = True

    fails("magic", idx(0x12345678, (1, 2, 2), [0] * 4), read_idx_images, "0x12345678.*0x00000803")
    fails("swapped", idx(0x801, (12,), [0] * 12), read_idx_images, "0x00000801.*0x00000803")
    fails("header", idx(0x803, (1, 2, 2), [])[:9], read_idx_images, "header truncated")
    fails("payload", idx(0x803, (1, 2, 2), [0] * 3), read_idx_images, "payload has 3 bytes, header declares 4")
    fails("trailing", idx(0x801, (2,), [1, 2, 3]), read_idx_labels, "payload has 3 bytes, header declares 2")
    fails("gzip", gzip.compress(idx(0x801, (2,), [1, 2]))[:-5], read_idx_labels, "corrupt gzip")
    (tmp_path / "lab3").write_bytes(idx(0x801, (3,), [0, 1, 2]))
    with pytest.raises(FormatError, match="3 labels for 1 images"):
        load_mnist_idx(tmp_path / "img", tmp_path / "lab3")
    results["count"] = True
    model = tmp_path / "m"
    assert cli.run(["synth", "--count", "2", "--out", str(model)]) == 0
    results["cli exit 2"] = cli.run(["eval", "--model", str(model / "model.ckpt"), "--input",
                                     str(tmp_path / "payload"), "--out", str(tmp_path / "e")]) == cli.EXIT_DATA
    ok = all(results.values())
    record(10, ok, f"{sum(results.values())}/{len(results)} IDX fixtures behave per contract: {', '.join(results)}")
    assert ok
