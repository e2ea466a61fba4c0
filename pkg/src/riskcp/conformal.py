"""Mondrian (class-conditional) inductive conformal prediction.

Each candidate label ``k`` of a test point is scored against the calibration
scores of class ``k`` only::

    p_k = #{i : y_i = k, score_i >= score_k(x)} / n_k            (unsmoothed)
    p_k = (#{i : y_i = k, score_i >= score_k(x)} + 1) / (n_k + 1)  (smoothed)

and label ``k`` joins the prediction set when ``p_k > alpha``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from riskcp.classifier import ScoreModel
from riskcp.core import DataError, Dataset

__all__ = [
    "NONCONFORMITY",
    "FingerprintMismatch",
    "CalibrationTable",
    "PredictionRecord",
    "nonconformity_inverse_prob",
    "calibrate",
    "p_value",
    "p_values",
    "predict",
    "predict_batch",
    "record_from_pvalues",
    "confidence_from_pvalues",
    "label_scores",
]


class FingerprintMismatch(ValueError):
    """The calibration table was built for a different model."""


def nonconformity_inverse_prob(probs, y):
    """``1 - probs[y]``; vectorizes over rows when ``probs`` is 2-d."""
    probs = np.asarray(probs, dtype=float)
    y = np.asarray(y)
    K = probs.shape[-1]
    if np.any(y < 0) or np.any(y >= K):
        raise IndexError(f"label index out of range for {K} classes")
    if probs.ndim == 1:
        return float(1.0 - probs[int(y)])
    return 1.0 - probs[np.arange(probs.shape[0]), y]


NONCONFORMITY: dict[str, Callable] = {"inverse_prob": nonconformity_inverse_prob}


def label_scores(probs: np.ndarray, fn_name: str = "inverse_prob") -> np.ndarray:
    """Nonconformity of every row under every label hypothesis, shape ``(n, K)``."""
    fn = NONCONFORMITY[fn_name]
    probs = np.atleast_2d(probs)
    n, K = probs.shape
    return np.stack([fn(probs, np.full(n, k)) for k in range(K)], axis=1)


@dataclass(frozen=True)
class CalibrationTable:
    labels: tuple[str, ...]
    scores: tuple[np.ndarray, ...]
    fn_name: str
    model_fingerprint: str

    def __post_init__(self):
        if len(self.scores) != len(self.labels):
            raise ValueError("one score list per label required")
        fixed = []
        for lab, s in zip(self.labels, self.scores):
            s = np.sort(np.asarray(s, dtype=float).reshape(-1))
            if s.size == 0:
                raise DataError(f"class {lab!r} has no calibration scores")
            s.setflags(write=False)
            fixed.append(s)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "scores", tuple(fixed))

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(s.size for s in self.scores)

    def to_dict(self) -> dict:
        return {
            "schema_version": "1",
            "label_set": list(self.labels),
            "scores": {lab: s.tolist() for lab, s in zip(self.labels, self.scores)},
            "nonconformity": self.fn_name,
            "model_fingerprint": self.model_fingerprint,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibrationTable":
        labels = tuple(doc["label_set"])
        return cls(labels, tuple(doc["scores"][lab] for lab in labels), doc["nonconformity"], doc["model_fingerprint"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def calibrate(model: ScoreModel, cal: Dataset, fn_name: str = "inverse_prob") -> CalibrationTable:
    """Bucket the true-label nonconformity scores of ``cal`` by class."""
    if fn_name not in NONCONFORMITY:
        raise ValueError(f"unknown nonconformity function {fn_name!r}")
    if tuple(cal.labels) != tuple(model.labels):
        raise DataError(f"label sets differ: model {model.labels} vs data {cal.labels}")
    missing = [lab for lab, c in zip(cal.labels, cal.class_counts()) if c == 0]
    if missing:
        raise DataError(f"no calibration examples for classes {missing}")
    probs = np.atleast_2d(model.predict_proba(cal.X))
    s = NONCONFORMITY[fn_name](probs, cal.y)
    per_class = tuple(s[cal.y == k] for k in range(cal.n_classes))
    return CalibrationTable(cal.labels, per_class, fn_name, model.fingerprint())


def p_value(table: CalibrationTable, score: float, k: int, smoothed: bool = False) -> float:
    if not 0 <= k < len(table.labels):
        raise IndexError(f"unknown class index {k}")
    s = table.scores[k]
    ge = s.size - int(np.searchsorted(s, score, side="left"))
    if smoothed:
        return (ge + 1) / (s.size + 1)
    return ge / s.size


def p_values(table: CalibrationTable, scores: np.ndarray, smoothed: bool = False) -> np.ndarray:
    """Vectorized :func:`p_value` over an ``(n, K)`` matrix of hypothesis scores."""
    scores = np.atleast_2d(scores)
    out = np.empty(scores.shape)
    for k, s in enumerate(table.scores):
        ge = s.size - np.searchsorted(s, scores[:, k], side="left")
        out[:, k] = (ge + 1) / (s.size + 1) if smoothed else ge / s.size
    return out


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    p_values: tuple[float, ...]
    prediction_set: tuple[int, ...]
    point_prediction: int
    confidence: float
    credibility: float
    rejected: bool
    alpha: float

    def set_labels(self, labels: Sequence[str]) -> tuple[str, ...]:
        return tuple(labels[k] for k in self.prediction_set)


def confidence_from_pvalues(p) -> tuple[float, float, int]:
    """Return ``(confidence, credibility, point)``.

    confidence = 1 - second largest p, credibility = largest p, point =
    argmax with ties to the lower index. Under the ``p > eps`` membership
    rule, confidence equals ``sup{1 - eps : |set_eps| <= 1}``.
    """
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size < 2:
        raise ValueError("need at least two p-values")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    point = int(np.argmax(p))
    top2 = np.sort(p)[-2:]
    return float(1.0 - top2[0]), float(top2[1]), point


def record_from_pvalues(p, alpha: float, instance_id: str = "") -> PredictionRecord:
    """Build a record straight from a p-value vector."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    p = tuple(float(v) for v in np.asarray(p, dtype=float).reshape(-1))
    conf, cred, point = confidence_from_pvalues(p)
    members = tuple(k for k, v in enumerate(p) if v > alpha)
    return PredictionRecord(instance_id, p, members, point, conf, cred, not members, float(alpha))


def _check(model: ScoreModel, table: CalibrationTable) -> None:
    if model.fingerprint() != table.model_fingerprint:
        raise FingerprintMismatch("calibration table was built from a different model")


def predict(model, table, x, alpha: float, smoothed: bool = False, instance_id: str = "") -> PredictionRecord:
    """Conformal prediction for one feature vector (or :class:`~riskcp.core.Instance`)."""
    _check(model, table)
    if hasattr(x, "features"):
        instance_id = instance_id or x.id
        x = x.features
    probs = np.atleast_2d(model.predict_proba(np.asarray(x, dtype=float)))
    p = p_values(table, label_scores(probs, table.fn_name), smoothed)[0]
    return record_from_pvalues(p, alpha, instance_id)


def dataset_pvalues(model, table, X, smoothed: bool = False, threads: int = 1) -> np.ndarray:
    """``(n, K)`` p-values for every row of ``X``; chunks run on ``threads`` workers."""
    _check(model, table)
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        return np.zeros((0, len(table.labels)))

    def run(chunk):
        probs = np.atleast_2d(model.predict_proba(chunk))
        return p_values(table, label_scores(probs, table.fn_name), smoothed)

    if threads <= 1:
        return run(X)
    chunks = np.array_split(X, min(threads * 4, X.shape[0]))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.vstack(list(pool.map(run, chunks)))


def predict_batch(model, table, ds: Dataset, alpha: float, smoothed: bool = False, threads: int = 1) -> list[PredictionRecord]:
    P = dataset_pvalues(model, table, ds.X, smoothed, threads)
    return [record_from_pvalues(P[i], alpha, ds.ids[i]) for i in range(len(ds))]

