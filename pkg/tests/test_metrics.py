import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskcp.classifier import TrainConfig, fit_logistic
from riskcp.conformal import PredictionRecord, calibrate, predict_batch, record_from_pvalues
from riskcp.core import make_rng, sample_benchmark
from riskcp.metrics import (
    SetConfusion,
    alpha_sweep,
    avg_set_size,
    coverage_bound,
    coverage_guarantee_check,
    coverage_trials,
    effective_coverage,
    ranking,
    set_confusion,
)

LABELS = ("TF", "TI", "T-EV")


def rec(members, id="x", p=None, conf=0.5, cred=0.5, point=None):
    members = tuple(members)
    if point is None:
        point = members[0] if members else 0
    return PredictionRecord(id, p or (0.5, 0.5), members, point, conf, cred, not members, 0.1)


class TestCoverage:
    def test_hand_count(self):
        recs = [rec([0]), rec([0, 1]), rec([])]
        assert effective_coverage(recs, [0, 1, 0]) == pytest.approx(2 / 3)

    def test_full_and_empty(self):
        assert effective_coverage([rec([0, 1])] * 4, [0, 1, 1, 0]) == 1.0
        assert effective_coverage([rec([])] * 4, [0, 1, 1, 0]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            effective_coverage([rec([0])], [0, 1])


class TestSetSize:
    def test_examples(self):
        assert avg_set_size([rec([0]), rec([0, 1]), rec([])]) == 1.0
        assert avg_set_size([rec([1])] * 5) == 1.0
        assert avg_set_size([rec([0, 1, 2])] * 3) == 3.0

    def test_empty(self):
        with pytest.raises(ValueError):
            avg_set_size([])


class TestConfusion:
    def test_hand_tally(self):
        c = set_confusion([rec([0]), rec([1]), rec([0, 1]), rec([])], [0, 0, 0, 0])
        assert (c.correct_singleton, c.incorrect_singleton, c.inconclusive, c.empty) == (1, 1, 1, 1)

    def test_all_correct(self):
        c = set_confusion([rec([1])] * 7, [1] * 7)
        assert c == SetConfusion(7, 0, 0, 0)

    def test_empty_input(self):
        assert set_confusion([], []) == SetConfusion()
        assert SetConfusion().to_dict()["total"] == 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            set_confusion([rec([0])], [])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.integers(0, 2)), max_size=40),
       st.floats(0.01, 0.99))
def test_confusion_partitions(rows, alpha):
    recs = [record_from_pvalues(p, alpha) for p, _ in rows]
    truths = [t for _, t in rows]
    assert set_confusion(recs, truths).total == len(rows)


@pytest.fixture(scope="module")
def trained():
    rng = make_rng(21, 0)
    train = sample_benchmark(600, (1, 1, 1), 3, 1.5, rng, LABELS)
    cal = sample_benchmark(1500, (1, 1, 1), 3, 1.5, rng, LABELS)
    test = sample_benchmark(3000, (1, 1, 1), 3, 1.5, rng, LABELS)
    m = fit_logistic(train, TrainConfig(0.5, 80, 1e-4, 10**9, 0))
    return m, calibrate(m, cal), test


ALPHAS = [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9]


class TestSweep:
    def test_errors_track_alpha(self, trained):
        m, t, test = trained
        for row in alpha_sweep(m, t, test, ALPHAS, smoothed=True):
            assert abs(row.mean_err - row.sig) <= 0.03, row

    def test_monotone(self, trained):
        m, t, test = trained
        rows = alpha_sweep(m, t, test, ALPHAS)
        for a, b in zip(rows, rows[1:]):
            assert b.avg_c <= a.avg_c
            assert b.mean_err >= a.mean_err

    def test_consistent_with_records(self, trained):
        m, t, test = trained
        for a in (0.05, 0.3):
            row = alpha_sweep(m, t, test, [a])[0]
            recs = predict_batch(m, t, test, a)
            assert row.mean_err == 1 - effective_coverage(recs, test.y)
            assert row.avg_c == pytest.approx(avg_set_size(recs))
            assert row.n_correct <= row.n == len(test)
            assert 0 <= row.avg_c <= 3
            assert set(row.class_err) == set(LABELS)

    def test_duplicate_alpha(self, trained):
        m, t, test = trained
        a, b = alpha_sweep(m, t, test, [0.1, 0.1])
        assert a.to_dict() == b.to_dict()

    def test_bad_alpha(self, trained):
        m, t, test = trained
        with pytest.raises(ValueError):
            alpha_sweep(m, t, test, [0.0])


class TestGuarantee:
    def test_bound(self):
        assert coverage_bound(0.1, 100) == pytest.approx(0.9 - 2 * math.sqrt(0.09 / 100))

    @pytest.mark.slow
    def test_alpha_005(self):
        cov, ok = coverage_guarantee_check(30, 500, 1000, 0.05, seed=0)
        assert ok, cov

    def test_alpha_half(self):
        cov, ok = coverage_guarantee_check(30, 500, 1000, 0.5, seed=1)
        assert ok and cov >= 0.48

    def test_tiny_alpha(self):
        cov, ok = coverage_guarantee_check(3, 100, 200, 1e-9, seed=2)
        assert ok and cov == 1.0

    def test_thread_independent(self):
        a = coverage_trials(4, 100, 100, [0.1], seed=3)
        b = coverage_trials(4, 100, 100, [0.1], seed=3, threads=3)
        assert a == b

    def test_class_conditional_imbalanced(self):
        res = coverage_trials(20, 500, 500, [0.1], seed=4, class_weights=(10, 1, 2))
        n_minority = 20 * 500 / 13
        for c in res.class_coverage[0]:
            assert c >= coverage_bound(0.1, int(n_minority)) - 0.01, res.class_coverage


class TestRanking:
    def test_published_order(self):
        recs = [
            rec([2], "c7", conf=0.61, cred=0.5),
            rec([2], "c12", conf=0.88, cred=0.5),
            rec([2], "c3", conf=0.81, cred=0.5),
            rec([0], "c1", conf=0.99, cred=0.9),
        ]
        out = ranking(recs, LABELS, ["T-EV"])
        assert [r[0] for r in out] == ["c12", "c3", "c7"]
        assert [r[2] for r in out] == [0.88, 0.81, 0.61]

    def test_empty_target(self):
        assert ranking([rec([0])], LABELS, ["T-EV"]) == []

    def test_credibility_tiebreak(self):
        out = ranking([rec([2], "a", conf=0.7, cred=0.2), rec([2], "b", conf=0.7, cred=0.9)], LABELS, ["T-EV"])
        assert [r[0] for r in out] == ["b", "a"]

    def test_rejected_excluded(self):
        assert ranking([rec([], "a", point=2)], LABELS, ["T-EV"]) == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.sampled_from([0.05, 0.2])), max_size=30))
def test_ranking_is_permutation_of_eligible(rows):
    recs = [record_from_pvalues(p, a, f"r{i}") for i, (p, a) in enumerate(rows)]
    out = ranking(recs, LABELS, ["TI", "T-EV"])
    eligible = sorted(r.id for r in recs if not r.rejected and r.point_prediction in (1, 2))
    assert sorted(o[0] for o in out) == eligible
    keys = [(-o[2], -o[3], o[0]) for o in out]
    assert keys == sorted(keys)
