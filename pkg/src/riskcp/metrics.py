"""Coverage / efficiency metrics, alpha sweeps, ranking and the coverage harness."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from riskcp.classifier import ScoreModel, TrainConfig, fit_logistic
from riskcp.conformal import CalibrationTable, PredictionRecord, calibrate, dataset_pvalues
from riskcp.core import Dataset, make_rng, sample_benchmark

__all__ = [
    "SetConfusion",
    "SweepRow",
    "CoverageResult",
    "effective_coverage",
    "avg_set_size",
    "set_confusion",
    "alpha_sweep",
    "coverage_trials",
    "coverage_guarantee_check",
    "coverage_bound",
    "ranking",
]


def _check_lengths(records, truths):
    if len(records) != len(truths):
        raise ValueError(f"{len(records)} records but {len(truths)} truths")


def effective_coverage(records: Sequence[PredictionRecord], truths) -> float:
    """Fraction of records whose prediction set contains the true label index."""
    _check_lengths(records, truths)
    if not records:
        return float("nan")
    return sum(int(t) in r.prediction_set for r, t in zip(records, truths)) / len(records)


def avg_set_size(records: Sequence[PredictionRecord]) -> float:
    if not records:
        raise ValueError("average set size of no records is undefined")
    return sum(len(r.prediction_set) for r in records) / len(records)


@dataclass(frozen=True)
class SetConfusion:
    correct_singleton: int = 0
    incorrect_singleton: int = 0
    inconclusive: int = 0
    empty: int = 0

    @property
    def total(self) -> int:
        return self.correct_singleton + self.incorrect_singleton + self.inconclusive + self.empty

    def to_dict(self) -> dict:
        return {
            "correct_singleton": self.correct_singleton,
            "incorrect_singleton": self.incorrect_singleton,
            "inconclusive": self.inconclusive,
            "empty": self.empty,
            "total": self.total,
        }


def set_confusion(records: Sequence[PredictionRecord], truths) -> SetConfusion:
    _check_lengths(records, truths)
    counts = [0, 0, 0, 0]
    for r, t in zip(records, truths):
        size = len(r.prediction_set)
        if size == 0:
            counts[3] += 1
        elif size >= 2:
            counts[2] += 1
        elif r.prediction_set[0] == int(t):
            counts[0] += 1
        else:
            counts[1] += 1
    return SetConfusion(*counts)


@dataclass(frozen=True)
class SweepRow:
    """One alpha of the sweep.

    ``class_err`` and ``class_avg_c`` are keyed by label: per-class miss
    rate and mean set size over test rows of that class.
    """

    sig: float
    mean_err: float
    avg_c: float
    n_correct: int
    n: int
    class_err: dict = field(default_factory=dict)
    class_avg_c: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "sig": self.sig,
            "mean_err": self.mean_err,
            "avg_c": self.avg_c,
            "n_correct": self.n_correct,
            "n": self.n,
            "class_err": dict(self.class_err),
            "class_avg_c": dict(self.class_avg_c),
        }


def _sweep_row(P: np.ndarray, y: np.ndarray, labels, alpha: float) -> SweepRow:
    sets = P > alpha
    hit = sets[np.arange(len(y)), y]
    sizes = sets.sum(axis=1)
    class_err, class_avg_c = {}, {}
    for k, lab in enumerate(labels):
        m = y == k
        class_err[lab] = float(1.0 - hit[m].mean()) if m.any() else float("nan")
        class_avg_c[lab] = float(sizes[m].mean()) if m.any() else float("nan")
    n_correct = int(hit.sum())
    return SweepRow(
        sig=float(alpha),
        mean_err=1.0 - n_correct / len(y),
        avg_c=float(sizes.mean()),
        n_correct=n_correct,
        n=len(y),
        class_err=class_err,
        class_avg_c=class_avg_c,
    )


def alpha_sweep(
    model: ScoreModel,
    table: CalibrationTable,
    test: Dataset,
    alphas: Iterable[float],
    smoothed: bool = False,
    threads: int = 1,
) -> list[SweepRow]:
    """Coverage and efficiency of the Mondrian sets for each significance level.

    p-values are computed once and thresholded per alpha; ``mean_err`` is
    exactly ``1 - effective_coverage``.
    """
    alphas = [float(a) for a in alphas]
    for a in alphas:
        if not 0 < a < 1:
            raise ValueError(f"alpha must be in (0, 1), got {a}")
    if len(test) == 0:
        raise ValueError("alpha sweep needs a nonempty test set")
    P = dataset_pvalues(model, table, test.X, smoothed, threads)
    return [_sweep_row(P, test.y, test.labels, a) for a in alphas]


def coverage_bound(alpha: float, n: int) -> float:
    """``1 - alpha - 2 sqrt(alpha (1 - alpha) / n)``."""
    return 1.0 - alpha - 2.0 * math.sqrt(alpha * (1.0 - alpha) / n)


@dataclass(frozen=True)
class CoverageResult:
    alphas: tuple[float, ...]
    coverage: tuple[float, ...]
    class_coverage: tuple[tuple[float, ...], ...]
    n_trials: int
    n_test: int


# fast full-batch trainer for repeated trials
_TRIAL_CFG = TrainConfig(learning_rate=0.5, epochs=150, l2=1e-4, batch_size=10**9)


def _one_trial(t, seed, n_train, n_cal, n_test, weights, d, separation, alphas, smoothed):
    rng = make_rng(seed, 1000 + t)
    K = len(weights)
    while True:
        train = sample_benchmark(n_train, weights, d, separation, rng, prefix="tr")
        cal = sample_benchmark(n_cal, weights, d, separation, rng, prefix="ca")
        if np.all(train.class_counts() > 0) and np.all(cal.class_counts() > 0):
            break
    test = sample_benchmark(n_test, weights, d, separation, rng, prefix="te")
    model = fit_logistic(train, _TRIAL_CFG)
    table = calibrate(model, cal)
    P = dataset_pvalues(model, table, test.X, smoothed)
    hits = []
    for a in alphas:
        hit = (P > a)[np.arange(n_test), test.y]
        per_class = [(int(hit[test.y == k].sum()), int((test.y == k).sum())) for k in range(K)]
        hits.append((int(hit.sum()), per_class))
    return hits


def coverage_trials(
    n_trials: int,
    n_cal: int,
    n_test: int,
    alphas: Sequence[float],
    seed: int = 0,
    class_weights: Sequence[float] = (1.0, 1.0, 1.0),
    d: int = 4,
    separation: float = 1.5,
    n_train: int = 500,
    smoothed: bool = True,
    threads: int = 1,
) -> CoverageResult:
    """Repeat generate / fit / calibrate / predict on fresh IID mixture data.

    Per-class coverage pools hits over all trials (each trial has its own
    RNG stream, so results do not depend on ``threads``).
    """
    if min(n_trials, n_cal, n_test, n_train) < 1:
        raise ValueError("trial and sample sizes must be positive")
    alphas = tuple(float(a) for a in alphas)
    args = (seed, n_train, n_cal, n_test, tuple(class_weights), d, separation, alphas, smoothed)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda t: _one_trial(t, *args), range(n_trials)))
    else:
        results = [_one_trial(t, *args) for t in range(n_trials)]
    K = len(class_weights)
    cov, cls_cov = [], []
    for j in range(len(alphas)):
        cov.append(sum(r[j][0] for r in results) / (n_trials * n_test))
        per = []
        for k in range(K):
            h = sum(r[j][1][k][0] for r in results)
            n = sum(r[j][1][k][1] for r in results)
            per.append(h / n if n else float("nan"))
        cls_cov.append(tuple(per))
    return CoverageResult(alphas, tuple(cov), tuple(cls_cov), n_trials, n_test)


def coverage_guarantee_check(n_trials: int, n_cal: int, n_test: int, alpha: float, seed: int = 0, **kwargs):
    """Empirical check of the marginal ``1 - alpha`` guarantee with smoothed p-values.

    Returns ``(mean coverage, passed)`` where passing means coverage is at
    least ``1 - alpha - 2 sqrt(alpha (1 - alpha) / (n_trials n_test))``.
    """
    kwargs["smoothed"] = True
    res = coverage_trials(n_trials, n_cal, n_test, [alpha], seed, **kwargs)
    cov = res.coverage[0]
    return cov, bool(cov >= coverage_bound(alpha, n_trials * n_test))


def ranking(records: Sequence[PredictionRecord], labels: Sequence[str], targets: Iterable[str]):
    """Accepted records predicted as a target label, most confident first.

    Sorted by confidence, then credibility (both descending), then id.
    Returns ``(id, label, confidence, credibility)`` tuples.
    """
    wanted = {labels.index(t) for t in targets if t in labels}
    eligible = [r for r in records if not r.rejected and r.point_prediction in wanted]
    eligible.sort(key=lambda r: (-r.confidence, -r.credibility, r.id))
    return [(r.id, labels[r.point_prediction], r.confidence, r.credibility) for r in eligible]
