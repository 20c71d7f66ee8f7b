"""Classifier score heads, the class-weighted binary cross-entropy and a toy trainer.

The loss is computed per class as::

    L_i = -(alpha_i * y_i * log(p_i) + beta_i * (1 - y_i) * log(1 - p_i))

and averaged over classes. Raising ``alpha`` for a class pushes recall up for
that class, raising ``beta`` pushes precision up. ``train_toy`` fits a single
linear layer with this loss so the effect can be observed at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError
from .labels import BINARY_CLASSES, BINARY_NSFW_INDEX
from .metrics import ConfusionCounts, UndefinedMetric, precision, recall

EPS = 1e-7


class ScoreMode(str, Enum):
    MULTI_LABEL = "MULTI_LABEL"
    BINARY = "BINARY"


@dataclass(frozen=True, eq=False)
class ClassScores:
    mode: ScoreMode
    values: np.ndarray
    nsfw_index: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size == 0:
            raise ValueError("class scores must be a non-empty vector")
        if np.any(vals < 0) or np.any(vals > 1):
            raise ValueError("class scores must lie in [0, 1]")
        if self.mode is ScoreMode.BINARY:
            if vals.size != 2:
                raise ValueError("binary scores need exactly two values")
            if abs(vals.sum() - 1.0) > 1e-6:
                raise ValueError("binary scores must sum to 1")
        if not 0 <= self.nsfw_index < vals.size:
            raise ValueError("nsfw_index out of range")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def nsfw(self) -> float:
        return float(self.values[self.nsfw_index])

    def __eq__(self, other):
        if not isinstance(other, ClassScores):
            return NotImplemented
        return (self.mode, self.nsfw_index) == (other.mode, other.nsfw_index) and np.array_equal(
            self.values, other.values)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LossWeights:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64).ravel()
        b = np.asarray(self.beta, dtype=np.float64).ravel()
        if a.shape != b.shape:
            raise ValueError("alpha and beta must have the same length")
        if np.any(a <= 0) or np.any(b <= 0):
            raise ValueError("loss weights must be strictly positive")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    def __len__(self):
        return self.alpha.size

    @classmethod
    def uniform(cls, num_classes: int) -> "LossWeights":
        return cls(np.ones(num_classes), np.ones(num_classes))

    @classmethod
    def for_nsfw(cls, num_classes: int, nsfw_index: int, alpha_nsfw: float = 1.0,
                 beta_nsfw: float = 1.0) -> "LossWeights":
        """Unit weights everywhere except the NSFW class."""
        a, b = np.ones(num_classes), np.ones(num_classes)
        a[nsfw_index] = alpha_nsfw
        b[nsfw_index] = beta_nsfw
        return cls(a, b)


@dataclass(frozen=True)
class LabeledSample:
    features: tuple
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(float(v) for v in self.features))
        object.__setattr__(self, "labels", tuple(float(v) for v in self.labels))


class OptimizerKind(str, Enum):
    SGD_NESTEROV = "SGD_NESTEROV"
    RMSPROP = "RMSPROP"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: OptimizerKind = OptimizerKind.SGD_NESTEROV
    learning_rate: float = 0.04
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    rms_decay: float = 0.9
    rms_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @classmethod
    def rmsprop(cls, **kw) -> "OptimizerConfig":
        kw.setdefault("learning_rate", 0.004)
        return cls(kind=OptimizerKind.RMSPROP, **kw)


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid_scores(logits, nsfw_index: int | None = None) -> ClassScores:
    """Independent per-class sigmoid, as used by the 81-way multi-label head."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    idx = z.size - 1 if nsfw_index is None else nsfw_index
    return ClassScores(ScoreMode.MULTI_LABEL, expit(z), idx)


def softmax_scores(logits, nsfw_index: int = BINARY_NSFW_INDEX) -> ClassScores:
    z = np.asarray(logits, dtype=np.float64).ravel()
    if z.size != 2:
        raise ValueError("binary head expects exactly 2 logits")
    return ClassScores(ScoreMode.BINARY, _stable_softmax(z), nsfw_index)


def _per_class_loss(p, comp, y, alpha, beta):
    # log arguments are floored at EPS; an exact 1.0 still gives log(1) == 0
    return -(alpha * y * np.log(np.maximum(p, EPS))
             + beta * (1.0 - y) * np.log(np.maximum(comp, EPS)))


def weighted_bce_loss(scores, labels, w: LossWeights):
    """Per-class weighted BCE and its mean over classes.

    ``scores`` is a ``ClassScores`` or a probability vector. Returns
    ``(per_class, mean)``.
    """
    p = scores.values if isinstance(scores, ClassScores) else np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape[-1] != y.shape[-1] or p.shape[-1] != len(w):
        raise ValueError("scores, labels and weights must have matching lengths")
    per_class = _per_class_loss(p, 1.0 - p, y, w.alpha, w.beta)
    return per_class, float(per_class.mean()) if per_class.ndim == 1 else per_class.mean(axis=-1)


def _loss_and_grad(z: np.ndarray, y: np.ndarray, w: LossWeights, mode: ScoreMode):
    """Mean-over-classes loss and its logit gradient for a batch of rows."""
    n_cls = z.shape[-1]
    alpha, beta = w.alpha, w.beta
    if mode is ScoreMode.MULTI_LABEL:
        p, q = expit(z), expit(-z)
        loss = _per_class_loss(p, q, y, alpha, beta).mean(axis=-1)
        grad = (-alpha * y * q * (p > EPS) + beta * (1.0 - y) * p * (q > EPS)) / n_cls
        return loss, grad
    p = _stable_softmax(z)
    comp = p[..., ::-1] if n_cls == 2 else 1.0 - p
    loss = _per_class_loss(p, comp, y, alpha, beta).mean(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(comp > EPS, p / np.where(comp > 0, comp, 1.0), 0.0)
    # g_i * p_i where g = dL/dp, then push through the softmax Jacobian
    gp = (-alpha * y * (p > EPS) + beta * (1.0 - y) * ratio) / n_cls
    grad = gp - p * gp.sum(axis=-1, keepdims=True)
    return loss, grad


def loss_gradient(logits, labels, w: LossWeights, mode: ScoreMode) -> np.ndarray:
    """Exact gradient of the mean weighted loss with respect to the logits.

    Works on a single vector or row-wise on a 2-D batch. For the sigmoid head
    with unit weights this is ``(p - y) / C``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape or z.shape[-1] != len(w):
        raise ValueError("logits, labels and weights must have matching lengths")
    return _loss_and_grad(z, y, w, ScoreMode(mode))[1]


@dataclass
class LinearHead:
    """Single linear layer followed by sigmoid (multi-label) or softmax (binary)."""

    weights: np.ndarray
    bias: np.ndarray
    mode: ScoreMode = ScoreMode.MULTI_LABEL
    class_labels: tuple = ()
    nsfw_index: int = -1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.mode = ScoreMode(self.mode)
        if self.nsfw_index < 0:
            self.nsfw_index = self.bias.size - 1
        if not self.class_labels:
            self.class_labels = tuple(f"class_{i}" for i in range(self.bias.size))
        self.class_labels = tuple(self.class_labels)

    def logits(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias

    def probabilities(self, x) -> np.ndarray:
        z = self.logits(x)
        return expit(z) if self.mode is ScoreMode.MULTI_LABEL else _stable_softmax(z)

    def scores(self, x) -> ClassScores:
        z = self.logits(x)
        if self.mode is ScoreMode.MULTI_LABEL:
            return sigmoid_scores(z, self.nsfw_index)
        return softmax_scores(z, self.nsfw_index)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "class_labels": list(self.class_labels),
            "nsfw_index": self.nsfw_index,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearHead":
        return cls(np.array(d["weights"], dtype=np.float64).reshape(-1, len(d["bias"])),
                   np.array(d["bias"], dtype=np.float64), ScoreMode(d["mode"]),
                   tuple(d["class_labels"]), int(d["nsfw_index"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "LinearHead":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainingLog:
    epoch_loss: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)
    # parameter snapshot (weights, bias) after each epoch
    trajectory: list = field(default_factory=list)


def _as_arrays(dataset):
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        x, y = dataset
        return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if not dataset:
        raise ConfigError("dataset is empty")
    dims = {len(s.features) for s in dataset}
    ncls = {len(s.labels) for s in dataset}
    if len(dims) != 1 or len(ncls) != 1:
        raise ConfigError("inconsistent feature or label dimensions in dataset")
    x = np.array([s.features for s in dataset], dtype=np.float64)
    y = np.array([s.labels for s in dataset], dtype=np.float64)
    return x, y


def _accuracy(probs: np.ndarray, y: np.ndarray, mode: ScoreMode) -> float:
    if mode is ScoreMode.MULTI_LABEL:
        return float(np.mean((probs >= 0.5) == (y >= 0.5)))
    return float(np.mean(np.argmax(probs, axis=1) == np.argmax(y, axis=1)))


def train_toy(dataset, w: LossWeights, opt: OptimizerConfig = OptimizerConfig(),
              mode: ScoreMode = ScoreMode.MULTI_LABEL, class_labels: Sequence[str] = (),
              nsfw_index: int = -1):
    """Fit a linear head by mini-batch descent on the weighted loss.

    ``dataset`` is a sequence of ``LabeledSample`` or an ``(X, Y)`` array
    pair. Training is deterministic for a given ``opt.seed``. Returns the
    trained ``LinearHead`` and a ``TrainingLog``.
    """
    x, y = _as_arrays(dataset)
    if len(x) == 0:
        raise ConfigError("dataset is empty")
    if y.shape[1] != len(w):
        raise ConfigError(f"labels have {y.shape[1]} classes but weights have {len(w)}")
    mode = ScoreMode(mode)
    if mode is ScoreMode.BINARY and y.shape[1] != 2:
        raise ConfigError("binary mode needs two-column one-hot labels")
    if mode is ScoreMode.BINARY and not class_labels:
        class_labels = BINARY_CLASSES
        nsfw_index = BINARY_NSFW_INDEX if nsfw_index < 0 else nsfw_index

    rng = np.random.default_rng(opt.seed)
    n, dim = x.shape
    n_cls = y.shape[1]
    weights = rng.normal(0.0, 0.01, size=(dim, n_cls))
    bias = np.zeros(n_cls)
    params = [weights, bias]
    state = [np.zeros_like(weights), np.zeros_like(bias)]
    log = TrainingLog()

    for _ in range(opt.epochs):
        order = rng.permutation(n)
        for start in range(0, n, opt.batch_size):
            idx = order[start:start + opt.batch_size]
            xb = x[idx]
            _, g_z = _loss_and_grad(xb @ params[0] + params[1], y[idx], w, mode)
            grads = [xb.T @ g_z / len(idx), g_z.mean(axis=0)]
            for p, s, g in zip(params, state, grads):
                if opt.kind is OptimizerKind.SGD_NESTEROV:
                    s *= opt.momentum
                    s += g
                    p -= opt.learning_rate * (g + opt.momentum * s)
                else:
                    s *= opt.rms_decay
                    s += (1.0 - opt.rms_decay) * g * g
                    p -= opt.learning_rate * g / (np.sqrt(s) + opt.rms_eps)
        z = x @ params[0] + params[1]
        loss, _ = _loss_and_grad(z, y, w, mode)
        probs = expit(z) if mode is ScoreMode.MULTI_LABEL else _stable_softmax(z)
        log.epoch_loss.append(float(loss.mean()))
        log.epoch_accuracy.append(_accuracy(probs, y, mode))
        log.trajectory.append((params[0].copy(), params[1].copy()))

    head = LinearHead(params[0], params[1], mode, tuple(class_labels), nsfw_index)
    return head, log


def make_dial_dataset(n: int = 2000, seed: int = 0, nsfw_fraction: float = 0.35,
                      separation: float = 1.6):
    """Overlapping two-Gaussian toy set with a single NSFW label column.

    Class-conditional features are unit-variance 2-D Gaussians whose means
    sit ``separation`` apart along the diagonal, so the classes overlap and
    no threshold is error-free.
    """
    rng = np.random.default_rng(seed)
    y = (rng.uniform(size=n) < nsfw_fraction).astype(np.float64)
    offset = separation / (2.0 * np.sqrt(2.0))
    centers = np.where(y[:, None] > 0, offset, -offset)
    x = centers + rng.normal(size=(n, 2))
    return x, y[:, None]


def make_separable_dataset(n: int = 200, seed: int = 0, gap: float = 0.5):
    """Linearly separable 2-D binary set: points at least ``gap`` from the line x0 + x1 = 0."""
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < n:
        p = rng.uniform(-3, 3, size=2)
        margin = (p[0] + p[1]) / np.sqrt(2.0)
        if abs(margin) >= gap:
            pts.append(p)
    x = np.array(pts)
    y = ((x[:, 0] + x[:, 1]) > 0).astype(np.float64)[:, None]
    return x, y


@dataclass(frozen=True)
class DialRow:
    alpha: float
    beta: float
    precision: float | None
    recall: float | None
    counts: ConfusionCounts


def evaluate_head(head: LinearHead, x, y, threshold: float = 0.5) -> ConfusionCounts:
    probs = head.probabilities(x)[:, head.nsfw_index]
    truth = np.asarray(y)[:, head.nsfw_index] >= 0.5
    pred = probs >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & truth)), tn=int(np.sum(~pred & ~truth)),
        fp=int(np.sum(pred & ~truth)), fn=int(np.sum(~pred & truth)),
    )


def _maybe(metric, counts):
    try:
        return metric(counts)
    except UndefinedMetric:
        return None


def precision_recall_dial(dataset, beta_sweep: Sequence[float], alpha_nsfw: float = 1.0,
                          opt: OptimizerConfig = OptimizerConfig(), threshold: float = 0.5,
                          nsfw_index: int = -1) -> list[DialRow]:
    """Train one head per NSFW ``beta`` and report precision and recall at ``threshold``."""
    x, y = _as_arrays(dataset)
    n_cls = y.shape[1]
    idx = n_cls - 1 if nsfw_index < 0 else nsfw_index
    rows = []
    for beta in beta_sweep:
        w = LossWeights.for_nsfw(n_cls, idx, alpha_nsfw, beta)
        head, _ = train_toy((x, y), w, opt, nsfw_index=idx)
        counts = evaluate_head(head, x, y, threshold)
        rows.append(DialRow(float(alpha_nsfw), float(beta), _maybe(precision, counts),
                            _maybe(recall, counts), counts))
    return rows
