"""Linear softmax classifier heads trained on frozen embeddings."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .dataset import TAXONOMY, CesClass
from .embeddings.vectors import EmbeddingVector
from .errors import ConfigError, DataError, DimensionMismatch, NonFiniteLoss
from .metrics import MetricsReport, compute


@dataclass
class ProbeModel:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    classes: tuple
    trained_on: str = ""

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        c, _ = self.weights.shape
        if self.bias.shape != (c,) or len(self.classes) != c:
            raise DimensionMismatch("weights, bias and class list disagree on the class count")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("probe parameters must be finite")
        self.classes = tuple(self.classes)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dims(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, n_classes: int, dims: int, classes: Sequence | None = None, trained_on: str = ""):
        classes = tuple(classes) if classes is not None else tuple(range(n_classes))
        return cls(np.zeros((n_classes, dims)), np.zeros(n_classes), classes, trained_on)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 2e-3
    weight_decay: float = 0.0
    seed: int = 0
    optimizer: str = "adam_decoupled_decay"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    validation_fraction: float = 0.0
    patience: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.optimizer not in ("sgd", "adam_decoupled_decay"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in [0, 1)")


PRESETS: dict[str, TrainConfig] = {
    "text-probe": TrainConfig(epochs=5, batch_size=16, learning_rate=2e-5, weight_decay=0.01),
    "vision-probe": TrainConfig(epochs=100, batch_size=16, learning_rate=2e-3, weight_decay=0.0),
}


def preset(name: str, **overrides) -> TrainConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown probe preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides) if overrides else base


@dataclass
class TrainReport:
    epoch_losses: list[float]
    train_accuracy: float
    config: dict
    wall_time: float
    stopped_early: bool = False
    validation_losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _logits(W: np.ndarray, b: np.ndarray, X: np.ndarray) -> np.ndarray:
    return X @ W.T + b


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss_grad(W, b, X, y):
    """Mean cross-entropy and its gradient for integer targets ``y``."""
    z = _logits(W, b, X)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = X.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), y]))
    if not np.isfinite(loss):
        raise NonFiniteLoss("cross-entropy became non-finite")
    G = np.exp(z - logsum[:, None])
    G[np.arange(n), y] -= 1.0
    G /= n
    return loss, G.T @ X, G.sum(axis=0)


def forward(model: ProbeModel, x) -> np.ndarray:
    """Class probabilities ``softmax(Wx + b)``."""
    v = x.values if isinstance(x, EmbeddingVector) else np.asarray(x, dtype=np.float64)
    if v.shape != (model.dims,):
        raise DimensionMismatch(f"input has dims {v.shape[-1] if v.ndim else 0}, probe expects {model.dims}")
    return _softmax_rows(_logits(model.weights, model.bias, v[None, :]))[0]


def predict(model: ProbeModel, X: np.ndarray) -> list:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dims:
        raise DimensionMismatch(f"inputs have shape {X.shape}, probe expects (*, {model.dims})")
    idx = np.argmax(_logits(model.weights, model.bias, X), axis=1)
    return [model.classes[i] for i in idx]


def _stack(batch, classes) -> tuple[np.ndarray, np.ndarray]:
    pos = {c: i for i, c in enumerate(classes)}
    X = np.stack([x.values if isinstance(x, EmbeddingVector) else np.asarray(x, dtype=np.float64)
                  for x, _ in batch])
    try:
        y = np.array([pos[lbl] for _, lbl in batch], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]!r} is not one of the probe classes") from None
    return X, y


def loss_and_grad(model: ProbeModel, batch: Sequence[tuple]) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over ``batch`` and gradients w.r.t. weights and bias.

    Weight decay is not part of this gradient; the optimizer applies it.
    """
    if not batch:
        raise DataError("empty batch")
    X, y = _stack(batch, model.classes)
    if X.shape[1] != model.dims:
        raise DimensionMismatch(f"batch has dims {X.shape[1]}, probe expects {model.dims}")
    return _loss_grad(model.weights, model.bias, X, y)


def _default_classes(labels: Sequence[Hashable]) -> tuple:
    if all(isinstance(lbl, CesClass) for lbl in labels):
        return TAXONOMY
    return tuple(sorted(set(labels), key=lambda v: (str(type(v)), v)))


class _Adam:
    def __init__(self, shapes, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads, decay_mask):
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        for p, g, m, v, decay in zip(params, grads, self.m, self.v, decay_mask):
            if decay and cfg.weight_decay:
                p -= cfg.learning_rate * cfg.weight_decay * p
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def _sgd_step(params, grads, decay_mask, cfg: TrainConfig):
    for p, g, decay in zip(params, grads, decay_mask):
        if decay and cfg.weight_decay:
            p -= cfg.learning_rate * cfg.weight_decay * p
        p -= cfg.learning_rate * g


def train_probe(
    features: Sequence[tuple],
    config: TrainConfig,
    classes: Sequence | None = None,
    trained_on: str | None = None,
) -> tuple[ProbeModel, TrainReport]:
    """Fit a softmax head on ``(embedding, label)`` pairs.

    Deterministic for a fixed ``config.seed``: weights start uniform in
    ``±1/sqrt(D)``, bias at zero, and one generator drives every epoch's
    shuffle. Decoupled weight decay touches the weights, not the bias.
    """
    if not features:
        raise DataError("no training samples")
    labels = [lbl for _, lbl in features]
    classes = tuple(classes) if classes is not None else _default_classes(labels)
    missing = [c for c in classes if c not in set(labels)]
    if missing:
        raise DataError(f"no training samples for classes {missing}")
    dims = {(x.dims if isinstance(x, EmbeddingVector) else len(x)) for x, _ in features}
    if len(dims) != 1:
        raise DimensionMismatch(f"training embeddings have mixed dims {sorted(dims)}")
    if trained_on is None:
        first = features[0][0]
        trained_on = first.model_id if isinstance(first, EmbeddingVector) else ""

    X, y = _stack(features, classes)
    n, d = X.shape
    c = len(classes)
    rng = np.random.default_rng(config.seed)
    bound = 1.0 / np.sqrt(d)
    W = rng.uniform(-bound, bound, size=(c, d))
    b = np.zeros(c)

    X_val = y_val = None
    if config.validation_fraction > 0:
        perm = rng.permutation(n)
        n_val = max(1, int(round(config.validation_fraction * n)))
        val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        X_val, y_val = X[val_idx], y[val_idx]
        X, y = X[tr_idx], y[tr_idx]
        n = X.shape[0]

    adam = _Adam([W.shape, b.shape], config) if config.optimizer == "adam_decoupled_decay" else None
    start = time.perf_counter()
    losses: list[float] = []
    val_losses: list[float] = []
    best_val, since_best, stopped = np.inf, 0, False
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            loss, gW, gb = _loss_grad(W, b, X[idx], y[idx])
            total += loss * len(idx)
            if adam is not None:
                adam.step([W, b], [gW, gb], [True, False])
            else:
                _sgd_step([W, b], [gW, gb], [True, False], config)
        losses.append(total / n)
        if X_val is not None:
            vloss = _loss_grad(W, b, X_val, y_val)[0]
            val_losses.append(vloss)
            if vloss < best_val - 1e-12:
                best_val, since_best = vloss, 0
            else:
                since_best += 1
            if config.patience is not None and since_best >= config.patience:
                stopped = True
                break
    wall = time.perf_counter() - start
    model = ProbeModel(W, b, classes, trained_on)
    train_acc = 100.0 * float(np.mean(np.argmax(_logits(W, b, X), axis=1) == y))
    report = TrainReport(losses, train_acc, asdict(config), wall, stopped, val_losses)
    return model, report


def evaluate_probe(model: ProbeModel, test_features: Sequence[tuple], label: str = "") -> MetricsReport:
    """Score the probe on ``(embedding, label)`` pairs; embeddings supply item ids."""
    if not test_features:
        raise DataError("no test samples")
    X = np.stack([x.values for x, _ in test_features])
    preds = predict(model, X)
    ids = [x.item_id for x, _ in test_features]
    return compute(zip(ids, preds), [(x.item_id, lbl) for x, lbl in test_features],
                   classes=model.classes, label=label)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"CESPROBE"
_VERSION = 1


def _class_name(c) -> str:
    return c.value if isinstance(c, CesClass) else str(c)


def save_probe(model: ProbeModel, path: str | Path) -> Path:
    """Header (C, D, class order, model id) followed by little-endian float64 weights then bias."""
    path = Path(path)
    header = json.dumps({
        "C": model.n_classes,
        "D": model.dims,
        "classes": [_class_name(c) for c in model.classes],
        "model_id": model.trained_on,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(model.weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.bias, dtype="<f8").tobytes())
    return path


def load_probe(path: str | Path) -> ProbeModel:
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise DataError(f"{path}: not a probe checkpoint")
    off = len(_MAGIC)
    version, hlen = struct.unpack_from("<HI", raw, off)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<HI")
    header = json.loads(raw[off : off + hlen])
    off += hlen
    c, d = header["C"], header["D"]
    body = np.frombuffer(raw, dtype="<f8", offset=off)
    if body.size != c * d + c:
        raise DataError(f"{path}: checkpoint body has {body.size} values, expected {c * d + c}")
    classes = []
    for name in header["classes"]:
        try:
            classes.append(CesClass(name))
        except ValueError:
            classes.append(name)
    return ProbeModel(body[: c * d].reshape(c, d).copy(), body[c * d :].copy(), tuple(classes),
                      header.get("model_id", ""))
