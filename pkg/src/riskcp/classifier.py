"""Probabilistic classifiers behind a common scoring contract.

Anything exposing ``labels`` and ``predict_proba`` can be wrapped by the
conformal layer. Two built-ins ship here: multinomial logistic regression
trained by gradient descent, and a Laplace-smoothed k-nearest-neighbour vote.
"""

from __future__ import annotations

import hashlib
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from riskcp.core import DataError, Dataset, make_rng

logger = logging.getLogger(__name__)

__all__ = [
    "ScoreModel",
    "TrainConfig",
    "LogisticModel",
    "KNNModel",
    "BaggedModel",
    "TrainingError",
    "softmax",
    "softmax_loss_and_grad",
    "fit_logistic",
    "fit_bagged_logistic",
    "fit_knn",
    "accuracy",
    "reliability_diagram",
    "argmax_low",
    "load_model",
]


class TrainingError(RuntimeError):
    """Raised when training diverges or the training data is unusable."""


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def argmax_low(a: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest index (numpy's rule)."""
    return np.argmax(a, axis=-1)


class ScoreModel(ABC):
    """Contract: map feature rows to probability vectors over ``labels``."""

    labels: tuple[str, ...]
    feature_names: tuple[str, ...]

    @abstractmethod
    def predict_proba(self, X) -> np.ndarray:
        """Return an ``(n, K)`` array (or ``(K,)`` for a single row)."""

    @abstractmethod
    def to_dict(self) -> dict:
        ...

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def feature_scale(self) -> np.ndarray:
        """Per-feature spread used to size perturbations."""
        return np.ones(len(self.feature_names))

    def fingerprint(self) -> str:
        # models are immutable after construction, so the hash is cached
        fp = getattr(self, "_fingerprint", None)
        if fp is None:
            payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
            fp = hashlib.sha256(payload.encode()).hexdigest()
            self._fingerprint = fp
        return fp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def _rows(self, X) -> tuple[np.ndarray, bool]:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != len(self.feature_names):
            raise DataError(f"expected {len(self.feature_names)} features, got {X.shape[1]}")
        return X, single


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 500
    l2: float = 1e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be nonnegative")


def softmax_loss_and_grad(W, b, Xs, Y, l2):
    """Mean cross-entropy plus ``0.5 * l2 * ||W||^2`` and its gradient.

    ``Xs`` is the standardized design (n, d); ``Y`` one-hot targets (n, K).
    Returns ``(loss, dW, db)``.
    """
    n = Xs.shape[0]
    P = softmax(Xs @ W.T + b)
    logp = np.log(np.clip(P, 1e-300, None))
    loss = -np.sum(Y * logp) / n + 0.5 * l2 * np.sum(W * W)
    G = (P - Y) / n
    return loss, G.T @ Xs + l2 * W, G.sum(axis=0)


class LogisticModel(ScoreModel):
    """Multinomial logistic regression on internally standardized features."""

    def __init__(self, labels, feature_names, weights, bias, mean, std, metadata=None):
        self.labels = tuple(labels)
        self.feature_names = tuple(feature_names)
        self.weights = np.array(weights, dtype=float).reshape(len(self.labels), len(self.feature_names))
        self.bias = np.array(bias, dtype=float).reshape(len(self.labels))
        self.mean = np.array(mean, dtype=float)
        self.std = np.array(std, dtype=float)
        self.metadata = dict(metadata or {})
        if np.any(self.std <= 0):
            raise ValueError("standardizer stddevs must be positive")
        for arr in (self.weights, self.bias, self.mean, self.std):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite model parameters")
            arr.setflags(write=False)

    def standardize(self, X) -> np.ndarray:
        return (X - self.mean) / self.std

    def predict_proba(self, X) -> np.ndarray:
        X, single = self._rows(X)
        P = softmax(self.standardize(X) @ self.weights.T + self.bias)
        return P[0] if single else P

    def feature_scale(self) -> np.ndarray:
        return self.std.copy()

    def to_dict(self) -> dict:
        return {
            "schema_version": "1",
            "label_set": list(self.labels),
            "feature_names": list(self.feature_names),
            "weights": self.weights.reshape(-1).tolist(),
            "bias": self.bias.tolist(),
            "standardizer": {"means": self.mean.tolist(), "stds": self.std.tolist()},
            "metadata": {"type": "logistic", **self.metadata},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LogisticModel":
        meta = {k: v for k, v in doc.get("metadata", {}).items() if k != "type"}
        return cls(
            doc["label_set"],
            doc["feature_names"],
            doc["weights"],
            doc["bias"],
            doc["standardizer"]["means"],
            doc["standardizer"]["stds"],
            meta,
        )


def _standardizer(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[~(std > 0)] = 1.0
    return mean, std


def _require_all_classes(train: Dataset) -> None:
    missing = [lab for lab, c in zip(train.labels, train.class_counts()) if c == 0]
    if missing:
        raise TrainingError(f"classes absent from training data: {missing}")


def fit_logistic(train: Dataset, cfg: TrainConfig = TrainConfig()) -> LogisticModel:
    """Fit by (mini-)batch gradient descent with a fixed learning rate.

    Batches are drawn from a per-epoch permutation of the rows; with
    ``batch_size >= len(train)`` this is plain full-batch descent.
    """
    _require_all_classes(train)
    mean, std = _standardizer(train.X)
    Xs = (train.X - mean) / std
    n, d = Xs.shape
    K = train.n_classes
    Y = np.eye(K)[train.y]
    W = np.zeros((K, d))
    b = np.zeros(K)
    rng = make_rng(cfg.seed, 1)
    bs = min(cfg.batch_size, n)
    # overflow shows up as a non-finite loss, reported below as TrainingError
    with np.errstate(over="ignore", invalid="ignore"):
        losses = _descend(W, b, Xs, Y, cfg, rng, bs)
    logger.debug("logistic fit: loss %.4f -> %.4f", losses[0], losses[-1])
    meta = {"seed": cfg.seed, "config": asdict(cfg), "final_loss": losses[-1]}
    model = LogisticModel(train.labels, train.feature_names, W, b, mean, std, meta)
    model.loss_history = losses
    return model


def _descend(W, b, Xs, Y, cfg, rng, bs):
    """In-place gradient descent on ``W`` and ``b``; returns per-epoch full losses."""
    n = Xs.shape[0]
    losses = []
    for epoch in range(cfg.epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, dW, db = softmax_loss_and_grad(W, b, Xs[idx], Y[idx], cfg.l2)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            W -= cfg.learning_rate * dW
            b -= cfg.learning_rate * db
        full, _, _ = softmax_loss_and_grad(W, b, Xs, Y, cfg.l2)
        if not np.isfinite(full) or not np.all(np.isfinite(W)):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        losses.append(float(full))
    return losses


class BaggedModel(ScoreModel):
    """Average of member probabilities.

    With the inverse-probability score this equals averaging the members'
    nonconformity scores, since ``mean(1 - p) = 1 - mean(p)``.
    """

    def __init__(self, members):
        members = list(members)
        if not members:
            raise ValueError("need at least one member")
        self.members = members
        self.labels = members[0].labels
        self.feature_names = members[0].feature_names

    def predict_proba(self, X) -> np.ndarray:
        return np.mean([m.predict_proba(X) for m in self.members], axis=0)

    def feature_scale(self) -> np.ndarray:
        return self.members[0].feature_scale()

    def to_dict(self) -> dict:
        return {
            "schema_version": "1",
            "label_set": list(self.labels),
            "feature_names": list(self.feature_names),
            "members": [m.to_dict() for m in self.members],
            "metadata": {"type": "bagged"},
        }


def fit_bagged_logistic(train: Dataset, cfg: TrainConfig = TrainConfig(), n_models: int = 5) -> BaggedModel:
    """Logistic models on bootstrap resamples; a resample missing a class is redrawn."""
    if n_models < 1:
        raise ValueError("n_models must be >= 1")
    _require_all_classes(train)
    rng = make_rng(cfg.seed, 2)
    members = []
    while len(members) < n_models:
        idx = rng.integers(0, len(train), size=len(train))
        boot = train.subset(idx)
        if np.any(boot.class_counts() == 0):
            continue
        sub_cfg = TrainConfig(cfg.learning_rate, cfg.epochs, cfg.l2, cfg.batch_size, cfg.seed + len(members))
        members.append(fit_logistic(boot, sub_cfg))
    return BaggedModel(members)


class KNNModel(ScoreModel):
    """Smoothed neighbour vote: ``(votes_k + 1) / (k + K)``.

    Distances are Euclidean on features standardized with training
    statistics; equal distances keep training-row order.
    """

    def __init__(self, labels, feature_names, X, y, k, mean=None, std=None):
        self.labels = tuple(labels)
        self.feature_names = tuple(feature_names)
        self.X = np.array(X, dtype=float)
        self.y = np.array(y, dtype=np.int64)
        self.k = int(k)
        if mean is None or std is None:
            mean, std = _standardizer(self.X)
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)
        self._Xs = (self.X - self.mean) / self.std
        for arr in (self.X, self.y, self.mean, self.std, self._Xs):
            arr.setflags(write=False)

    def predict_proba(self, X) -> np.ndarray:
        X, single = self._rows(X)
        Q = (X - self.mean) / self.std
        d2 = ((Q[:, None, :] - self._Xs[None, :, :]) ** 2).sum(axis=-1)
        nn = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
        K = len(self.labels)
        votes = np.zeros((Q.shape[0], K))
        for j in range(self.k):
            votes[np.arange(Q.shape[0]), self.y[nn[:, j]]] += 1
        P = (votes + 1.0) / (self.k + K)
        return P[0] if single else P

    def feature_scale(self) -> np.ndarray:
        return self.std.copy()

    def to_dict(self) -> dict:
        return {
            "schema_version": "1",
            "label_set": list(self.labels),
            "feature_names": list(self.feature_names),
            "k": self.k,
            "train_X": self.X.tolist(),
            "train_y": self.y.tolist(),
            "standardizer": {"means": self.mean.tolist(), "stds": self.std.tolist()},
            "metadata": {"type": "knn"},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "KNNModel":
        return cls(
            doc["label_set"], doc["feature_names"], doc["train_X"], doc["train_y"], doc["k"],
            doc["standardizer"]["means"], doc["standardizer"]["stds"],
        )


def fit_knn(train: Dataset, k: int = 5) -> KNNModel:
    if not 1 <= k <= len(train):
        raise ValueError(f"k must be in [1, {len(train)}], got {k}")
    return KNNModel(train.labels, train.feature_names, train.X, train.y, k)


def load_model(path_or_doc) -> ScoreModel:
    """Rebuild a model from its JSON document (or a path to one)."""
    doc = path_or_doc
    if not isinstance(doc, dict):
        doc = json.loads(Path(doc).read_text())
    kind = doc.get("metadata", {}).get("type")
    if kind == "logistic":
        return LogisticModel.from_dict(doc)
    if kind == "knn":
        return KNNModel.from_dict(doc)
    if kind == "bagged":
        return BaggedModel([load_model(m) for m in doc["members"]])
    raise ValueError(f"unknown model type {kind!r}")


def accuracy(model: ScoreModel, ds: Dataset) -> float:
    if len(ds) == 0:
        raise DataError("accuracy of an empty dataset is undefined")
    pred = argmax_low(model.predict_proba(ds.X))
    return float(np.mean(pred == ds.y))


def reliability_diagram(model: ScoreModel, ds: Dataset, bins: int = 10):
    """Bucket instances by top probability into ``bins`` equal-width bins.

    Returns rows ``(center, mean_confidence, accuracy, count)``; empty bins
    carry NaN means and count 0.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    P = np.atleast_2d(model.predict_proba(ds.X)) if len(ds) else np.zeros((0, model.n_classes))
    conf = P.max(axis=1)
    correct = argmax_low(P) == ds.y
    which = np.minimum((conf * bins).astype(int), bins - 1)
    rows = []
    for b in range(bins):
        mask = which == b
        cnt = int(mask.sum())
        if cnt:
            rows.append(((b + 0.5) / bins, float(conf[mask].mean()), float(correct[mask].mean()), cnt))
        else:
            rows.append(((b + 0.5) / bins, float("nan"), float("nan"), 0))
    return rows
