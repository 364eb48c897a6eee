"""Generalized EM training, data ingestion and evaluation."""

from __future__ import annotations

import csv
import gzip
import io
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .bounds import count_active_paths
from .errors import ConfigError, DimensionError, FormatError, NumericError
from .inference import forward, jmap_latents
from .losses import VARIANCE_FLOOR, EStepCounter, LossWeights, cross_entropy, objective_and_gradient
from .micro import micro_architecture
from .model import (Architecture, DgmParams, init_params, min_rendered, mnist_stack, render,
                    sample_image, sample_z_batch, save_params)

UNLABELED = -1
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
METRIC_COLUMNS = ("epoch", "ce", "rc", "rpn", "kl", "mm", "total", "train_acc", "val_acc", "min_h", "active_ratio")


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    """Images of shape (n, C, H, W) in [0, 1] and labels, -1 marking unlabeled."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.ndim != 4:
            raise DimensionError(f"images must be (n, C, H, W), got {self.images.shape}")
        if self.labels is None:
            self.labels = np.full(len(self.images), UNLABELED, dtype=np.intp)
        self.labels = np.asarray(self.labels, dtype=np.intp).reshape(-1)
        if self.labels.shape[0] != self.images.shape[0]:
            raise DimensionError("one label per image required")

    def __len__(self):
        return self.images.shape[0]

    @property
    def labeled(self) -> np.ndarray:
        return self.labels >= 0

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index])

    def without_labels(self) -> "Dataset":
        return Dataset(self.images, np.full(len(self), UNLABELED, dtype=np.intp))

    def check_classes(self, n_classes: int) -> None:
        if np.any(self.labels >= n_classes):
            raise DimensionError(f"label {int(self.labels.max())} out of range for {n_classes} classes")


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return data


def _parse_idx(data: bytes, magic: int, ndim: int, path) -> np.ndarray:
    if len(data) < 4 + 4 * ndim:
        raise FormatError(f"{path}: header truncated ({len(data)} bytes)")
    found = struct.unpack(">I", data[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    start = 4 + 4 * ndim
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) - start != size:
        raise FormatError(f"{path}: payload has {len(data) - start} bytes, header declares {size}")
    return np.frombuffer(data, dtype=np.uint8, offset=start).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    """IDX image file (magic 0x803, u8 pixels) as floats in [0, 1], shape (n, 1, rows, cols)."""
    raw = _parse_idx(_read_bytes(path), IMAGE_MAGIC, 3, path)
    return (raw.astype(np.float64) / 255.0)[:, None]


def read_idx_labels(path) -> np.ndarray:
    return _parse_idx(_read_bytes(path), LABEL_MAGIC, 1, path).astype(np.intp)


def load_mnist_idx(images_path, labels_path=None) -> Dataset:
    """Parse an IDX image file and, optionally, its label file (plain or gzip)."""
    images = read_idx_images(images_path)
    if labels_path is None:
        return Dataset(images, None)
    labels = read_idx_labels(labels_path)
    if labels.shape[0] != images.shape[0]:
        raise FormatError(f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images")
    return Dataset(images, labels)


def write_idx_images(path, images) -> None:
    """Write (n, H, W) or (n, 1, H, W) images in [0, 1] as an IDX u8 file."""
    img = np.asarray(images, dtype=np.float64)
    if img.ndim == 4:
        if img.shape[1] != 1:
            raise DimensionError("IDX images are single-channel")
        img = img[:, 0]
    pixels = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = struct.pack(">4I", IMAGE_MAGIC, *pixels.shape)
    _write(path, header + pixels.tobytes())


def write_idx_labels(path, labels) -> None:
    lab = np.asarray(labels).astype(np.uint8)
    _write(path, struct.pack(">2I", LABEL_MAGIC, lab.shape[0]) + lab.tobytes())


def _write(path, data: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)


def load_mnist_dir(root, split: str = "train") -> Dataset:
    """Load ``<split>-images-idx3-ubyte[.gz]`` and its labels from a directory."""
    prefix = "train" if split == "train" else "t10k"
    root = Path(root)

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (root / name).exists():
                return root / name
        raise FileNotFoundError(f"{root / stem}[.gz] not found")

    return load_mnist_idx(find(f"{prefix}-images-idx3-ubyte"), find(f"{prefix}-labels-idx1-ubyte"))


def semi_supervised_split(data: Dataset, n_labeled: int, n_unlabeled: int, rng: np.random.Generator,
                          n_val: int = 0, balanced: bool = True):
    """Draw labeled, unlabeled (labels stripped) and validation subsets without overlap.

    ``balanced`` picks the same number of labeled images per class.
    """
    labels = data.labels
    order = rng.permutation(len(data))
    if balanced:
        classes = np.unique(labels[labels >= 0])
        per = n_labeled // len(classes)
        if per * len(classes) != n_labeled:
            raise ConfigError("balanced split needs n_labeled divisible by the class count")
        chosen = np.concatenate([order[labels[order] == c][:per] for c in classes])
        chosen = np.sort(chosen)
    else:
        chosen = np.sort(order[:n_labeled])
    rest = order[~np.isin(order, chosen)]
    if len(rest) < n_unlabeled + n_val:
        raise ConfigError("dataset too small for the requested split")
    unl = np.sort(rest[:n_unlabeled])
    val = np.sort(rest[n_unlabeled:n_unlabeled + n_val])
    return data.subset(chosen), data.subset(unl).without_labels(), data.subset(val)


def synth_dataset(true_params: DgmParams, n: int, labeled_fraction: float, rng: np.random.Generator,
                  sigma: float | None = None, n_sweeps: int = 10):
    """Sample n images from the generative process; strip labels from the rest.

    Returns the dataset and the ground truth (y, z) with z batched.  Labels
    are kept on the first ``round(n * labeled_fraction)`` samples.
    """
    if not 0 <= labeled_fraction <= 1:
        raise ConfigError("labeled_fraction must lie in [0, 1]")
    k = true_params.n_classes
    y = rng.choice(k, size=n, p=true_params.class_priors)
    zs = [None] * n
    for c in range(k):
        idx = np.flatnonzero(y == c)
        if len(idx):
            batch = sample_z_batch(true_params, c, rng, n_sweeps, len(idx))
            for j, i in enumerate(idx):
                zs[i] = batch[j]
    sigma = true_params.noise_sigma if sigma is None else sigma
    images = np.stack([sample_image(true_params, int(y[i]), zs[i], rng, sigma) for i in range(n)])
    labels = y.copy()
    labels[int(round(n * labeled_fraction)):] = UNLABELED
    return Dataset(images, labels), (y, zs)


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    """Every knob of a training run; ``from_text`` reads ``key = value`` lines."""

    epochs: int = 10
    batch_size: int = 64
    labeled_batch_size: int = 32
    optimizer: str = "sgd"
    learning_rate: float = 0.01
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    grad_clip: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    alpha_ce: float = 1.0
    alpha_rc: float = 0.5
    alpha_kl: float = 0.5
    alpha_mm: float = 0.5
    alpha_pn: float = 1.0
    alpha_max: float = 0.5
    alpha_min: float = 0.5
    maxmin: bool = False
    mm_floor: float = VARIANCE_FLOOR
    mm_per_channel: bool = True
    mm_detach: bool = False
    seed: int = 0
    labeled: int = 100
    unlabeled: int = 10000
    validation: int = 1000
    eval_every: int = 1
    monitor_nonnegativity: bool = True
    estep: str = "batch"
    arch: str = "mnist"
    width: float = 0.25
    resnet: bool = False
    densenet: bool = False
    noise_sigma: float = 0.1
    prior_floor: float = 0.01
    learn_priors: bool = True
    max_batches: int = 0
    data: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("epochs", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("labeled_batch_size", "labeled", "unlabeled", "validation", "max_batches"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.estep not in ("batch", "epoch"):
            raise ConfigError("estep must be 'batch' or 'epoch'")
        if self.arch not in ("mnist", "micro"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if not self.grad_clip >= 0:
            raise ConfigError("grad_clip must be non-negative")
        if not self.mm_floor > 0:
            raise ConfigError("mm_floor must be positive")
        if any(e < 1 or e > self.epochs for e in self.lr_decay_epochs):
            raise ConfigError("lr_decay_epochs must lie within 1..epochs")
        self.loss_weights()

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha_ce, self.alpha_rc, self.alpha_kl, self.alpha_mm, self.alpha_pn,
                           self.alpha_max, self.alpha_min, self.maxmin)

    def learning_rate_at(self, epoch: int) -> float:
        """Step schedule: multiply by the decay factor at every listed epoch (1-based)."""
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.learning_rate * self.lr_decay_factor**drops

    def architecture(self, n_classes: int = 10) -> Architecture:
        if self.arch == "micro":
            return micro_architecture(n_classes)
        return mnist_stack(self.width, n_classes, residual=self.resnet, dense=self.densenet)

    def updated(self, **changes) -> "TrainConfig":
        cfg = replace(self, **{k: v for k, v in changes.items() if v is not None})
        return cfg

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            name = key.strip().replace("-", "_")
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(getattr(cls, name, None), raw, name)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        mapping = {}
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {number}: expected key = value")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
        return cls.from_mapping(mapping)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(default, raw, name):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {name}") from exc
    return raw


# ---------------------------------------------------------------- optimizers


class Optimizer:
    """First-order update over a dict of named parameter arrays."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.state: dict = {}
        self.steps = 0

    def step(self, groups: dict, grads: dict, lr: float) -> dict:
        self.steps += 1
        if lr == 0:
            return groups
        grads = clip_by_global_norm(grads, self.config.grad_clip)
        return {name: value - lr * self._direction(name, grads[name]) for name, value in groups.items()}


def clip_by_global_norm(grads: dict, max_norm: float) -> dict:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm`` (0 disables)."""
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {name: g * (max_norm / norm) for name, g in grads.items()}


class SGD(Optimizer):
    def _direction(self, name, g):
        m = self.config.momentum
        v = self.state.get(name)
        v = g.copy() if v is None else m * v + g
        self.state[name] = v
        return v


class Adam(Optimizer):
    def _direction(self, name, g):
        b1, b2 = self.config.beta1, self.config.beta2
        m, v = self.state.get(name, (np.zeros_like(g), np.zeros_like(g)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        self.state[name] = (m, v)
        m_hat = m / (1 - b1**self.steps)
        v_hat = v / (1 - b2**self.steps)
        return m_hat / (np.sqrt(v_hat) + 1e-8)


def make_optimizer(config: TrainConfig) -> Optimizer:
    return (SGD if config.optimizer == "sgd" else Adam)(config)


# ---------------------------------------------------------------- evaluation


@dataclass
class Evaluation:
    accuracy: float
    mean_ce: float
    confusion: np.ndarray = field(repr=False)

    @property
    def error(self) -> float:
        return 1.0 - self.accuracy


def predict_logits(params: DgmParams, images, batch_size: int = 500) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    out = [nx.value_of(forward(params, images[i:i + batch_size]).logits)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.n_classes))


def evaluate(params: DgmParams, data: Dataset, batch_size: int = 500) -> Evaluation:
    """Accuracy, mean cross-entropy and confusion matrix (rows: true class) on labeled images."""
    mask = data.labeled
    k = params.n_classes
    if not mask.any():
        return Evaluation(math.nan, math.nan, np.zeros((k, k), dtype=np.int64))
    data.check_classes(k)
    logits = predict_logits(params, data.images[mask], batch_size)
    y = data.labels[mask]
    pred = logits.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    ce = float(np.mean(cross_entropy(logits, y)))
    return Evaluation(float(np.mean(pred == y)), ce, confusion)


# ---------------------------------------------------------------- EM loop


class TrainingAborted(NumericError):
    """The objective became non-finite; ``snapshot`` holds the state at that point."""

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


def _batches(n_unlabeled: int, n_labeled: int, config: TrainConfig, rng: np.random.Generator):
    """Index pairs (labeled, unlabeled) for one epoch.

    The epoch walks through the unlabeled pool once; the labeled pool is
    reshuffled and cycled so every batch carries labels.
    """
    n_batches = max(1, math.ceil(n_unlabeled / config.batch_size)) if n_unlabeled else \
        max(1, math.ceil(n_labeled / max(config.labeled_batch_size, 1)))
    if config.max_batches:
        n_batches = min(n_batches, config.max_batches)
    unl = rng.permutation(n_unlabeled)
    lab_order = np.concatenate([rng.permutation(n_labeled) for _ in range(
        math.ceil(n_batches * config.labeled_batch_size / max(n_labeled, 1)) + 1)]) if n_labeled else \
        np.zeros(0, dtype=np.intp)
    for b in range(n_batches):
        lab = lab_order[b * config.labeled_batch_size:(b + 1) * config.labeled_batch_size]
        yield lab, unl[b * config.batch_size:(b + 1) * config.batch_size]


def em_train(params: DgmParams, data: Dataset, config: TrainConfig, validation: Dataset | None = None,
             counter: EStepCounter | None = None, on_epoch=None):
    """Alternate E-steps (class and path inference) with SGD M-steps.

    ``data`` mixes labeled and unlabeled images (label -1).  Each minibatch
    pairs a slice of the unlabeled pool with labeled images; the objective
    re-infers (y, z) on the fly, so every M-step sees fresh latents.  With
    ``config.estep == "epoch"`` the unlabeled pseudo-labels are frozen at
    the start of every epoch instead.  Returns the trained parameters and
    one metrics dict per epoch.
    """
    data.check_classes(params.n_classes)
    weights = config.loss_weights()
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config)
    lab_idx = np.flatnonzero(data.labeled)
    unl_idx = np.flatnonzero(~data.labeled)
    x_lab_all, y_lab_all = data.images[lab_idx], data.labels[lab_idx]
    x_unl_all = data.images[unl_idx]
    labeled_set = data.subset(lab_idx)
    counter = counter if counter is not None else EStepCounter()
    history = []
    frozen = None
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate_at(epoch)
        if config.estep == "epoch" and len(unl_idx):
            frozen = predict_logits(params, x_unl_all).argmax(axis=1)
        sums = {k: 0.0 for k in ("ce", "rc", "rpn", "kl", "mm", "total")}
        n_batches = 0
        min_h = math.inf
        for lab, unl in _batches(len(unl_idx), len(lab_idx), config, rng):
            kw = {"mm_floor": config.mm_floor, "mm_per_channel": config.mm_per_channel,
                  "mm_detach": config.mm_detach}
            if frozen is not None:
                kw["pseudo_labels"] = frozen[unl]
            report, grads = objective_and_gradient(params, x_lab_all[lab], y_lab_all[lab], x_unl_all[unl],
                                                   weights, counter, **kw)
            if not math.isfinite(report.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                snapshot = {"epoch": epoch, "batch": n_batches, "components": dict(report.components),
                            "params": params}
                raise TrainingAborted(f"non-finite objective at epoch {epoch}, batch {n_batches}: "
                                      f"{report.components}", snapshot)
            if not config.learn_priors:
                grads["prior_logits"] = np.zeros_like(grads["prior_logits"])
            params = params.with_groups(opt.step(params.groups(), grads, lr))
            for k in sums:
                sums[k] += report.total if k == "total" else report.components[k]
            n_batches += 1
        row = {k: v / n_batches for k, v in sums.items()}
        row["epoch"] = epoch
        row["train_acc"] = evaluate(params, labeled_set).accuracy if len(lab_idx) else math.nan
        row["val_acc"] = evaluate(params, validation).accuracy if validation is not None and len(validation) \
            else math.nan
        cadence = epoch % config.eval_every == 0 or epoch == config.epochs
        if config.monitor_nonnegativity and cadence:
            min_h = _nonnegativity_monitor(params, data.images[:256])
        row["min_h"] = min_h if config.monitor_nonnegativity and cadence else math.nan
        row["active_ratio"] = count_active_paths(params, data.images, data.labels)[2] if cadence else math.nan
        history.append(row)
        if on_epoch is not None:
            on_epoch(row, params)
    return params, history


def _nonnegativity_monitor(params: DgmParams, images) -> float:
    """Smallest rendered activation h(1..L) over the inferred paths of ``images``."""
    trace = forward(params, images)
    y, z = jmap_latents(trace)
    return min_rendered(render(params, y, z))


def new_params(config: TrainConfig, n_classes: int = 10) -> DgmParams:
    arch = config.architecture(n_classes)
    return init_params(arch, np.random.default_rng(config.seed), config.noise_sigma, config.prior_floor)


# ---------------------------------------------------------------- output


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def metrics_csv(history: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in history:
        writer.writerow([format_value(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def write_metrics(path, history: list) -> None:
    Path(path).write_text(metrics_csv(history), newline="")


def run_training(config: TrainConfig, data: Dataset, out_dir, validation: Dataset | None = None,
                 params: DgmParams | None = None):
    """Train from ``config`` and write ``metrics.csv`` and ``model.ckpt`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_classes = int(data.labels.max()) + 1 if data.labeled.any() else 10
    params = params or new_params(config, max(n_classes, 2 if config.arch == "micro" else 10))
    history: list = []

    def record(row, _):
        history.append(row)
        write_metrics(out / "metrics.csv", history)

    try:
        params, _ = em_train(params, data, config, validation, on_epoch=record)
    except TrainingAborted as exc:
        save_params(exc.snapshot["params"], out / "nan_snapshot.ckpt")
        raise
    save_params(params, out / "model.ckpt")
    write_metrics(out / "metrics.csv", history)
    return params, history


__all__ = ["Dataset", "TrainConfig", "Evaluation", "TrainingAborted", "load_mnist_idx", "load_mnist_dir",
           "read_idx_images", "read_idx_labels", "write_idx_images", "write_idx_labels", "synth_dataset",
           "semi_supervised_split", "em_train", "clip_by_global_norm", "evaluate", "predict_logits", "make_optimizer",
           "metrics_csv", "write_metrics", "run_training", "new_params", "UNLABELED", "METRIC_COLUMNS"]
