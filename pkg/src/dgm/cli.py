"""Command line: train, evaluate, sample, reconstruct and run the numerical checks.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure (non-finite training objective, violated bound, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .bounds import all_reports, conjugate_form_check
from .errors import ConfigError, DimensionError, FormatError, NumericError
from .inference import reconstruct, write_pgm
from .losses import CHECKED_COMPONENTS, gradient_errors
from .micro import gradcheck_case, micro_architecture, random_micro_params
from .model import DENSE, PLAIN, RES, load_params, sample_images, save_params
from .training import (Dataset, TrainConfig, evaluate, format_value, load_mnist_dir, load_mnist_idx,
                       read_idx_images, run_training, semi_supervised_split, synth_dataset,
                       write_idx_images, write_idx_labels)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_DATA = "data/mnist"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), newline="")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- train / eval


_FLAG_KEYS = {"seed": "seed", "epochs": "epochs", "labeled": "labeled", "alpha_ce": "alpha_ce",
              "alpha_rc": "alpha_rc", "alpha_kl": "alpha_kl", "alpha_mm": "alpha_mm", "alpha_pn": "alpha_pn",
              "alpha_max": "alpha_max", "alpha_min": "alpha_min", "arch": "arch", "width": "width",
              "unlabeled": "unlabeled", "data": "data", "optimizer": "optimizer", "lr": "learning_rate",
              "grad_clip": "grad_clip", "batch_size": "batch_size"}


def _config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    changes = {key: getattr(args, flag) for flag, key in _FLAG_KEYS.items() if getattr(args, flag, None) is not None}
    for flag in ("maxmin", "resnet", "densenet"):
        if getattr(args, flag):
            changes[flag] = True
    cfg = cfg.updated(**changes)
    cfg.validate()
    return cfg


def _training_data(cfg: TrainConfig):
    """Labeled + unlabeled training pool and a validation set."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.arch == "micro":
        truth = random_micro_params(np.random.default_rng(cfg.seed), _micro_arch(), sigma=0.1)
        n = cfg.labeled + cfg.unlabeled + cfg.validation
        data, _ = synth_dataset(truth, n, 1.0, rng)
        labels = data.labels.copy()
        labels[cfg.labeled:cfg.labeled + cfg.unlabeled] = -1
        pool = Dataset(data.images[:cfg.labeled + cfg.unlabeled], labels[:cfg.labeled + cfg.unlabeled])
        return pool, data.subset(slice(cfg.labeled + cfg.unlabeled, n))
    train = load_mnist_dir(cfg.data or DEFAULT_DATA, "train")
    lab, unl, val = semi_supervised_split(train, cfg.labeled, cfg.unlabeled, rng, cfg.validation)
    pool = Dataset(np.concatenate([lab.images, unl.images]), np.concatenate([lab.labels, unl.labels]))
    return pool, val


def _micro_arch():
    return micro_architecture(2)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    pool, val = _training_data(cfg)
    (out / "config.cfg").write_text(cfg.to_text())
    run_training(cfg, pool, out, val)
    return EXIT_OK


def _eval_data(args):
    if args.input:
        return load_mnist_idx(args.input, args.labels)
    return load_mnist_dir(args.data or DEFAULT_DATA, "test")


def cmd_eval(args) -> int:
    params = load_params(args.model)
    data = _eval_data(args)
    if args.limit:
        data = data.subset(slice(0, args.limit))
    result = evaluate(params, data)
    out = _out_dir(args)
    _write_csv(out / "eval.csv", ("accuracy", "error", "mean_ce", "count"),
               [(format_value(result.accuracy), format_value(result.error), format_value(result.mean_ce),
                 int(result.confusion.sum()))])
    k = params.n_classes
    _write_csv(out / "confusion.csv", ["true"] + [f"pred_{c}" for c in range(k)],
               [[c] + [int(v) for v in result.confusion[c]] for c in range(k)])
    print(f"accuracy {result.accuracy:.4f}  mean_ce {result.mean_ce:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- generation


def cmd_sample(args) -> int:
    params = load_params(args.model)
    if not 0 <= args.y < params.n_classes:
        raise UsageError(f"class {args.y} outside 0..{params.n_classes - 1}")
    out = _out_dir(args)
    images = sample_images(params, args.y, args.count, args.seed, args.sweeps, args.sigma)
    rows = []
    for i, img in enumerate(images):
        name = f"sample_{i:04d}.pgm"
        write_pgm(out / name, img)
        rows.append((name, args.y, args.seed + i))
    _write_csv(out / "samples.csv", ("file", "y", "seed"), rows)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    params = load_params(args.model)
    images = read_idx_images(args.input)
    if not 0 <= args.index < len(images):
        raise UsageError(f"index {args.index} outside 0..{len(images) - 1}")
    image = reconstruct(params, images[args.index], args.y)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, image)
    return EXIT_OK


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.model:
        params = load_params(args.model)
    else:
        params = random_micro_params(np.random.default_rng(args.seed), _micro_arch(), sigma=0.1)
    data, (y, _) = synth_dataset(params, args.count, args.labeled_fraction, rng, args.sigma)
    out = _out_dir(args)
    if not args.model:
        save_params(params, out / "model.ckpt")
    write_idx_images(out / "images-idx3-ubyte", data.images)
    write_idx_labels(out / "labels-idx1-ubyte", y)
    _write_csv(out / "synth.csv", ("index", "y", "labeled"),
               [(i, int(y[i]), int(data.labels[i] >= 0)) for i in range(len(y))])
    return EXIT_OK


# ---------------------------------------------------------------- checks


def _check_inputs(rng, params, n):
    x = rng.uniform(0.0, 1.0, size=(n,) + params.arch.input_shape)
    y = rng.integers(0, params.n_classes, size=n)
    return x, y


def cmd_verify_bounds(args) -> int:
    rows, failed = [], 0
    for m in range(args.models):
        seed = args.seed + m
        rng = np.random.default_rng(seed)
        params = random_micro_params(rng, kinds=(PLAIN, RES, DENSE))
        x, y = _check_inputs(rng, params, args.samples)
        for report in all_reports(params, x, y, seed=seed):
            rows.append(report.row())
            failed += not report.holds
        spread = conjugate_form_check(params, x)
        ok = spread < 1e-9
        rows.append({"theorem": "conjugate_residual", "seed": seed, "lhs": repr(0.0), "mid": repr(spread),
                     "rhs": repr(1e-9), "slack": repr(1e-9 - spread), "holds": int(ok)})
        failed += not ok
    header = ("theorem", "seed", "lhs", "mid", "rhs", "slack", "holds")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, header, [[r[h] for h in header] for r in rows])
    print(f"{len(rows) - failed}/{len(rows)} bound checks hold")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    rows, failed = [], 0
    for m in range(args.models):
        seed = args.seed + m
        params, x_lab, y_lab, x_unl = gradcheck_case(seed)
        for name, weights in CHECKED_COMPONENTS.items():
            for per_channel in (False, True) if name == "mm" else (False,):
                errs = gradient_errors(params, x_lab, y_lab, x_unl, weights, mm_per_channel=per_channel)
                label = name + ("_channel" if per_channel else "")
                for group, err in errs.items():
                    ok = err < args.tol
                    failed += not ok
                    rows.append((seed, label, group, repr(err), int(ok)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, ("seed", "component", "group", "rel_err", "ok"), rows)
    print(f"{len(rows) - failed}/{len(rows)} gradient checks pass")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dgm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=0):
        p.add_argument("--seed", type=int, default=seed)
        p.add_argument("--threads", type=int, default=None, help="BLAS threads; 1 for reproducible runs")
        p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="EM training")
    common(p, seed=None)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--labeled", type=int)
    p.add_argument("--unlabeled", type=int)
    for name in ("ce", "rc", "kl", "mm", "pn", "max", "min"):
        p.add_argument(f"--alpha-{name}", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--lr", type=float)
    p.add_argument("--grad-clip", type=float, help="global gradient-norm cap; 0 disables")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--arch", choices=("mnist", "micro"))
    p.add_argument("--width", type=float)
    p.add_argument("--maxmin", action="store_true")
    p.add_argument("--resnet", action="store_true")
    p.add_argument("--densenet", action="store_true")
    p.add_argument("--data", help="directory with MNIST IDX files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--input", help="IDX image file (instead of --data)")
    p.add_argument("--labels", help="IDX label file matching --input")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="generate images of one class")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--y", "--class", dest="y", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--sweeps", type=int, default=10)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("reconstruct", help="render h(y*, z*; 0) for one input image")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--y", type=int, default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("verify-bounds", help="exhaustive bound checks on random micro-models")
    common(p)
    p.add_argument("--models", type=int, default=100)
    p.add_argument("--samples", type=int, default=10)
    p.set_defaults(func=cmd_verify_bounds)

    p = sub.add_parser("gradcheck", help="tape gradients against central differences")
    common(p)
    p.add_argument("--models", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="sample a labeled/unlabeled dataset from a model")
    common(p)
    p.add_argument("--model")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--labeled-fraction", type=float, default=0.1)
    p.add_argument("--sigma", type=float, default=None)
    p.set_defaults(func=cmd_synth)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DimensionError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
