"""Split-conformal set predictors used as comparison baselines.

``naive`` thresholds ``1 - p(k|x)``, ``top_k`` thresholds the rank of the
true label, and ``raps`` thresholds the cumulative sorted probability mass
plus a rank penalty. All three calibrate a single marginal quantile, unlike
the class-conditional Mondrian predictor which they are compared against.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from riskcp.classifier import ScoreModel
from riskcp.conformal import calibrate, dataset_pvalues
from riskcp.core import DataError, Dataset, make_rng

__all__ = [
    "QuantileState",
    "SetPredictor",
    "NaivePredictor",
    "TopKPredictor",
    "RapsPredictor",
    "MondrianPredictor",
    "conformal_quantile",
    "naive_predictor",
    "topk_predictor",
    "raps_predictor",
    "count_detected",
    "comparison_table",
    "write_comparison_csv",
    "descending_order",
]

COMPARISON_COLUMNS = ("alpha", "mondrian", "raps", "naive", "top_k")


def conformal_quantile(scores, alpha: float) -> float:
    """The ``ceil((n+1)(1-alpha))``-th smallest score, or ``inf`` past ``n``."""
    s = np.sort(np.asarray(scores, dtype=float).reshape(-1))
    if s.size == 0:
        raise ValueError("conformal_quantile needs at least one score")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    # guard against (n+1)(1-alpha) landing a hair above an integer
    rank = math.ceil((s.size + 1) * (1 - alpha) - 1e-9)
    if rank > s.size:
        return math.inf
    return float(s[max(rank, 1) - 1])


def descending_order(probs: np.ndarray) -> np.ndarray:
    """Label indices by decreasing probability; ties keep the lower index first."""
    return np.argsort(-np.atleast_2d(probs), axis=1, kind="stable")


@dataclass(frozen=True)
class QuantileState:
    threshold: float
    alpha: float
    method: str


class SetPredictor:
    """Calibrate once, then map feature rows to boolean ``(n, K)`` set masks."""

    method = ""

    def __init__(self, model: ScoreModel):
        self.model = model
        self.state: QuantileState | None = None

    @property
    def labels(self) -> tuple[str, ...]:
        return self.model.labels

    def calibrate(self, cal: Dataset, alpha: float) -> "SetPredictor":
        if len(cal) == 0:
            raise DataError("calibration set is empty")
        probs = np.atleast_2d(self.model.predict_proba(cal.X))
        q = conformal_quantile(self.calibration_scores(probs, cal.y), alpha)
        self.state = QuantileState(q, float(alpha), self.method)
        return self

    def calibration_scores(self, probs: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def mask_from_probs(self, probs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_mask(self, X) -> np.ndarray:
        if self.state is None:
            raise RuntimeError(f"{self.method} predictor used before calibrate()")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] == 0:
            return np.zeros((0, len(self.labels)), dtype=bool)
        return self.mask_from_probs(np.atleast_2d(self.model.predict_proba(X)))

    def predict_set(self, x) -> tuple[int, ...]:
        return tuple(np.flatnonzero(self.predict_mask(np.atleast_2d(x))[0]).tolist())


class NaivePredictor(SetPredictor):
    method = "naive"

    def calibration_scores(self, probs, y):
        return 1.0 - probs[np.arange(len(y)), y]

    def mask_from_probs(self, probs):
        return (1.0 - probs) <= self.state.threshold


class TopKPredictor(SetPredictor):
    method = "top_k"

    def calibration_scores(self, probs, y):
        order = descending_order(probs)
        return np.argmax(order == y[:, None], axis=1) + 1.0

    @property
    def k_star(self) -> int:
        q = self.state.threshold
        K = len(self.labels)
        return K if math.isinf(q) else min(int(q), K)

    def mask_from_probs(self, probs):
        order = descending_order(probs)
        mask = np.zeros(probs.shape, dtype=bool)
        rows = np.arange(probs.shape[0])[:, None]
        mask[rows, order[:, : self.k_star]] = True
        return mask


class RapsPredictor(SetPredictor):
    """Regularized adaptive prediction sets.

    Score of the label at 1-based rank ``r`` is the probability mass of
    ranks ``1..r`` plus ``lam * max(0, r - k_reg)``. The top-1 label is
    always kept. With ``randomized=True`` the own-label mass is scaled by a
    uniform draw (seeded), the usual tie-breaking variant.
    """

    method = "raps"

    def __init__(self, model: ScoreModel, lam: float = 0.01, k_reg: int = 1, randomized: bool = False, seed: int = 0):
        super().__init__(model)
        if lam < 0:
            raise ValueError("lambda must be nonnegative")
        if k_reg < 1:
            raise ValueError("k_reg must be a positive integer")
        self.lam = float(lam)
        self.k_reg = int(k_reg)
        self.randomized = bool(randomized)
        self._rng = make_rng(seed, 3)

    def _rank_scores(self, probs):
        order = descending_order(probs)
        sorted_p = np.take_along_axis(probs, order, axis=1)
        ranks = np.arange(1, probs.shape[1] + 1)
        cum = np.cumsum(sorted_p, axis=1)
        if self.randomized:
            u = self._rng.random((probs.shape[0], 1))
            cum = cum - (1.0 - u) * sorted_p
        return order, cum + self.lam * np.maximum(0, ranks - self.k_reg)

    def calibration_scores(self, probs, y):
        order, by_rank = self._rank_scores(probs)
        pos = np.argmax(order == y[:, None], axis=1)
        return by_rank[np.arange(len(y)), pos]

    def mask_from_probs(self, probs):
        order, by_rank = self._rank_scores(probs)
        keep = by_rank <= self.state.threshold
        keep[:, 0] = True
        mask = np.zeros(probs.shape, dtype=bool)
        np.put_along_axis(mask, order, keep, axis=1)
        return mask


class MondrianPredictor(SetPredictor):
    """Adapter exposing the class-conditional predictor through the same interface."""

    method = "mondrian"

    def __init__(self, model: ScoreModel, smoothed: bool = False):
        super().__init__(model)
        self.smoothed = smoothed
        self.table = None

    def calibrate(self, cal: Dataset, alpha: float) -> "MondrianPredictor":
        if not 0 < alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {alpha}")
        self.table = calibrate(self.model, cal)
        self.state = QuantileState(float(alpha), float(alpha), self.method)
        return self

    def predict_mask(self, X) -> np.ndarray:
        if self.table is None:
            raise RuntimeError("mondrian predictor used before calibrate()")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return dataset_pvalues(self.model, self.table, X, self.smoothed) > self.state.alpha


def naive_predictor(model, cal, alpha) -> NaivePredictor:
    return NaivePredictor(model).calibrate(cal, alpha)


def topk_predictor(model, cal, alpha) -> TopKPredictor:
    return TopKPredictor(model).calibrate(cal, alpha)


def raps_predictor(model, cal, alpha, lam: float = 0.01, k_reg: int = 1, randomized: bool = False) -> RapsPredictor:
    return RapsPredictor(model, lam, k_reg, randomized).calibrate(cal, alpha)


def count_detected(pred: SetPredictor, ds: Dataset, targets: Iterable[str]) -> int:
    """Rows whose prediction set is a nonempty subset of the ``targets`` labels."""
    if len(ds) == 0:
        return 0
    target = np.zeros(len(pred.labels), dtype=bool)
    for lab in targets:
        target[pred.labels.index(lab)] = True
    mask = pred.predict_mask(ds.X)
    return int(np.sum(mask.any(axis=1) & ~(mask & ~target).any(axis=1)))


def comparison_table(
    model: ScoreModel,
    cal: Dataset,
    test: Dataset,
    alphas: Sequence[float],
    targets: Iterable[str],
    smoothed: bool = False,
    lam: float = 0.01,
    k_reg: int = 1,
) -> list[dict]:
    """Detection counts per method and alpha, one row per alpha."""
    targets = list(targets)
    rows = []
    for a in alphas:
        preds = {
            "mondrian": MondrianPredictor(model, smoothed).calibrate(cal, a),
            "raps": RapsPredictor(model, lam, k_reg).calibrate(cal, a),
            "naive": NaivePredictor(model).calibrate(cal, a),
            "top_k": TopKPredictor(model).calibrate(cal, a),
        }
        row = {"alpha": float(a)}
        row.update({name: count_detected(p, test, targets) for name, p in preds.items()})
        rows.append(row)
    return rows


def write_comparison_csv(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in COMPARISON_COLUMNS})
