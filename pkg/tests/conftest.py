import numpy as np
import pytest

from riskcp.classifier import ScoreModel
from riskcp.core import Dataset


class TableModel(ScoreModel):
    """Looks up a fixed probability row by the integer in feature 0."""

    def __init__(self, labels, probs, feature_names=("idx",)):
        self.labels = tuple(labels)
        self.feature_names = tuple(feature_names)
        self.probs = np.asarray(probs, dtype=float)

    def predict_proba(self, X):
        X, single = self._rows(X)
        P = self.probs[X[:, 0].astype(int)]
        return P[0] if single else P

    def to_dict(self):
        return {"type": "table", "labels": list(self.labels), "probs": self.probs.tolist()}


class FnModel(ScoreModel):
    """Probabilities from an arbitrary vectorized function of the features."""

    def __init__(self, labels, d, fn, tag="fn"):
        self.labels = tuple(labels)
        self.feature_names = tuple(f"f{j}" for j in range(d))
        self.fn = fn
        self.tag = tag

    def predict_proba(self, X):
        X, single = self._rows(X)
        P = self.fn(X)
        return P[0] if single else P

    def to_dict(self):
        return {"type": "fn", "tag": self.tag, "labels": list(self.labels)}


def table_dataset(labels, y, prefix="r"):
    """Dataset whose only feature is the row index (pairs with TableModel)."""
    y = np.asarray(y)
    X = np.arange(len(y), dtype=float).reshape(-1, 1)
    return Dataset(tuple(labels), X, y, tuple(f"{prefix}{i}" for i in range(len(y))), ("idx",))


@pytest.fixture
def three_labels():
    return ("TF", "TI", "T-EV")


# acceptance summary: one PASS/FAIL line per criterion after the run

_CRITERIA: dict[int, tuple[str, list[bool]]] = {}
_NODES: dict[str, int] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA.setdefault(m.args[0], (m.args[1], []))
            _NODES[item.nodeid] = m.args[0]


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if report.nodeid in _NODES:
        _CRITERIA[_NODES[report.nodeid]][1].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    ran = {n: v for n, v in _CRITERIA.items() if v[1]}
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ran):
        title, results = ran[num]
        verdict = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"{verdict} criterion {num:2d}: {title} ({sum(results)}/{len(results)} tests)")
