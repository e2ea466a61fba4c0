"""Data model, CSV ingestion, dataset splitting and synthetic benchmarks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "DataError",
    "Instance",
    "Dataset",
    "SplitSpec",
    "make_rng",
    "load_csv",
    "read_table",
    "save_csv",
    "split",
    "synth_benchmark",
    "sample_benchmark",
    "class_centers",
]


class DataError(ValueError):
    """Raised for malformed datasets, CSV files or split requests."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Deterministic generator for the ``(seed, stream)`` pair.

    PCG64 seeded through a ``SeedSequence`` so that independent streams
    (per trial, per ensemble member, ...) never overlap.
    """
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be nonnegative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class Instance:
    id: str
    features: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.features, dtype=float).reshape(-1)
        if arr.size < 1:
            raise DataError(f"instance {self.id!r} has no features")
        if not np.all(np.isfinite(arr)):
            raise DataError(f"instance {self.id!r} has non-finite features")
        object.__setattr__(self, "features", arr)


def _validate_labels(labels: Sequence[str]) -> tuple[str, ...]:
    labels = tuple(str(lab) for lab in labels)
    if len(labels) < 2:
        raise DataError(f"need at least 2 labels, got {list(labels)}")
    if len(set(labels)) != len(labels):
        raise DataError(f"duplicate labels in {list(labels)}")
    return labels


@dataclass(frozen=True)
class Dataset:
    """Immutable labeled feature matrix.

    ``labels`` fixes the class order; ``y`` holds indices into it.
    """

    labels: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    ids: tuple[str, ...]
    feature_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        labels = _validate_labels(self.labels)
        X = np.array(self.X, dtype=float, copy=True)
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(0, len(self.feature_names) or 1)
        if X.ndim != 2:
            raise DataError(f"feature matrix must be 2-d, got shape {X.shape}")
        n, d = X.shape
        if d < 1:
            raise DataError("datasets need at least one feature")
        if not np.all(np.isfinite(X)):
            bad = np.argwhere(~np.isfinite(X))[0]
            raise DataError(f"non-finite feature at row {bad[0]}, column {bad[1]}")
        y = np.array(self.y, dtype=np.int64, copy=True).reshape(-1)
        if y.shape[0] != n:
            raise DataError(f"{n} feature rows but {y.shape[0]} labels")
        if n and (y.min() < 0 or y.max() >= len(labels)):
            raise DataError("label index out of range")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != n:
            raise DataError(f"{n} rows but {len(ids)} ids")
        names = tuple(self.feature_names) or tuple(f"f{j}" for j in range(d))
        if len(names) != d:
            raise DataError(f"{d} features but {len(names)} feature names")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "feature_names", names)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def instance(self, i: int) -> Instance:
        return Instance(self.ids[i], self.X[i])

    def instances(self) -> Iterator[tuple[Instance, int]]:
        for i in range(len(self)):
            yield self.instance(i), int(self.y[i])

    def index_of(self, instance_id: str) -> int:
        try:
            return self.ids.index(instance_id)
        except ValueError:
            raise KeyError(f"id {instance_id!r} not found") from None

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DataError(f"unknown label {label!r}; known: {list(self.labels)}") from None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        return Dataset(
            self.labels,
            self.X[idx].reshape(len(idx), self.n_features),
            self.y[idx],
            tuple(self.ids[i] for i in idx),
            self.feature_names,
        )

    def where_label(self, label: str) -> "Dataset":
        k = self.label_index(label)
        return self.subset(np.flatnonzero(self.y == k))


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (2.0, 1.0, 1.0)
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        ratios = tuple(float(r) for r in self.ratios)
        if len(ratios) != 3 or any(r < 0 or not math.isfinite(r) for r in ratios):
            raise DataError(f"need three nonnegative ratios, got {self.ratios}")
        if sum(ratios) <= 0:
            raise DataError("split ratios must sum to a positive number")
        object.__setattr__(self, "ratios", ratios)


def _allocate(m: int, ratios: Sequence[float], min_one: bool) -> list[int]:
    """Split ``m`` items proportionally; leftovers go to train, then cal, then test."""
    total = sum(ratios)
    live = [i for i, r in enumerate(ratios) if r > 0]
    sizes = [int(math.floor(m * r / total)) if r > 0 else 0 for r in ratios]
    rem = m - sum(sizes)
    while rem > 0:
        for i in live:
            if rem == 0:
                break
            sizes[i] += 1
            rem -= 1
    if min_one:
        for i in live:
            if sizes[i] == 0:
                donor = max(live, key=lambda j: (sizes[j], -j))
                sizes[donor] -= 1
                sizes[i] += 1
    return sizes


def split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Partition ``ds`` into (train, calibration, test).

    In stratified mode every class is allocated separately, so per-class
    proportions hold to within one instance per split.
    """
    if len(ds) == 0:
        raise DataError("cannot split an empty dataset")
    rng = make_rng(spec.seed, 0)
    parts: list[list[int]] = [[], [], []]
    if spec.stratified:
        n_live = sum(r > 0 for r in spec.ratios)
        for k in range(ds.n_classes):
            members = np.flatnonzero(ds.y == k)
            if members.size == 0:
                continue
            if members.size < n_live:
                raise DataError(
                    f"class {ds.labels[k]!r} has {members.size} members, "
                    f"fewer than the {n_live} nonempty splits"
                )
            members = rng.permutation(members)
            sizes = _allocate(members.size, spec.ratios, min_one=True)
            start = 0
            for part, size in zip(parts, sizes):
                part.extend(members[start:start + size].tolist())
                start += size
    else:
        order = rng.permutation(len(ds))
        sizes = _allocate(len(ds), spec.ratios, min_one=False)
        start = 0
        for part, size in zip(parts, sizes):
            part.extend(order[start:start + size].tolist())
            start += size
    return tuple(ds.subset(sorted(p)) for p in parts)


def read_table(path, label_column: str = "label", id_column: str = "id"):
    """Parse a dataset CSV into ``(ids, X, label strings, feature names)``.

    No constraint on the number of distinct labels; see :func:`load_csv`.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row expected") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in header {header}")
        li = header.index(label_column)
        ii = header.index(id_column) if id_column in header else None
        feat_cols = [j for j in range(len(header)) if j not in (li, ii)]
        if not feat_cols:
            raise DataError(f"{path}: no feature columns")
        rows, labs, ids = [], [], []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
            vals = []
            for j in feat_cols:
                cell = row[j].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric value {cell!r} at row {r}, column {header[j]!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: non-finite value at row {r}, column {header[j]!r}")
                vals.append(v)
            rows.append(vals)
            labs.append(row[li].strip())
            ids.append(row[ii].strip() if ii is not None else f"row-{r}")
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate ids")
    X = np.array(rows, dtype=float).reshape(len(rows), len(feat_cols))
    return tuple(ids), X, labs, tuple(header[j] for j in feat_cols)


def load_csv(path, label_column: str = "label", id_column: str = "id", labels: Sequence[str] | None = None) -> Dataset:
    """Read a dataset CSV.

    The header row names the columns. ``label_column`` holds string labels;
    an optional ``id_column`` holds instance ids (rows are otherwise named
    ``row-<n>``, 1-based). Every other column must parse as a finite real.
    Label order is first appearance in the file unless ``labels`` fixes it
    (e.g. to a trained model's order); then unknown labels are an error.
    """
    ids, X, labs, names = read_table(path, label_column, id_column)
    if labels is None:
        labels = list(dict.fromkeys(labs))
        if len(labels) < 2:
            raise DataError(f"{path}: need at least 2 distinct labels, found {labels}")
    else:
        labels = list(labels)
        unknown = sorted(set(labs) - set(labels))
        if unknown:
            raise DataError(f"{path}: labels {unknown} not in expected set {labels}")
    index = {lab: k for k, lab in enumerate(labels)}
    return Dataset(tuple(labels), X, [index[lab] for lab in labs], ids, names)


def save_csv(ds: Dataset, path, label_column: str = "label", id_column: str = "id") -> None:
    """Write ``ds`` as CSV with 17 significant digits (exact float round-trip)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([id_column, *ds.feature_names, label_column])
        for i in range(len(ds)):
            w.writerow([ds.ids[i], *(f"{v:.17g}" for v in ds.X[i]), ds.labels[ds.y[i]]])


def class_centers(n_classes: int, d: int, separation: float) -> np.ndarray:
    """Mean of each benchmark class.

    Class k sits at ``separation * s * e_{k mod d}`` with sign ``s = +1`` for
    ``k // d`` even and ``-1`` otherwise; after 2d classes the radius grows by
    one ``separation`` per wrap so centers stay distinct.
    """
    centers = np.zeros((n_classes, d))
    for k in range(n_classes):
        wrap = k // d
        sign = 1.0 if wrap % 2 == 0 else -1.0
        centers[k, k % d] = separation * sign * (1 + wrap // 2)
    return centers


def _labels_for(n_classes: int, labels: Sequence[str] | None) -> tuple[str, ...]:
    if labels is None:
        return tuple(f"C{k}" for k in range(n_classes))
    if len(labels) != n_classes:
        raise DataError(f"{n_classes} classes but {len(labels)} label names")
    return tuple(labels)


def synth_benchmark(
    n_per_class: Sequence[int],
    d: int,
    separation: float,
    seed: int = 0,
    labels: Sequence[str] | None = None,
) -> Dataset:
    """Gaussian-mixture benchmark with fixed class counts.

    Class k is drawn from ``N(center_k, I_d)``, see :func:`class_centers`.
    Rows are shuffled; ids are ``s<index>``.
    """
    counts = [int(c) for c in n_per_class]
    if len(counts) < 2 or any(c <= 0 for c in counts):
        raise DataError(f"need >= 2 positive class counts, got {list(n_per_class)}")
    if d < 1:
        raise DataError(f"dimension must be >= 1, got {d}")
    if not separation >= 0:
        raise DataError(f"separation must be >= 0, got {separation}")
    rng = make_rng(seed, 0)
    y = rng.permutation(np.repeat(np.arange(len(counts)), counts))
    centers = class_centers(len(counts), d, separation)
    X = centers[y] + rng.standard_normal((y.size, d))
    ids = tuple(f"s{i}" for i in range(y.size))
    return Dataset(_labels_for(len(counts), labels), X, y, ids)


def sample_benchmark(
    n: int,
    class_weights: Sequence[float],
    d: int,
    separation: float,
    rng: np.random.Generator,
    labels: Sequence[str] | None = None,
    prefix: str = "s",
) -> Dataset:
    """IID draw of ``n`` rows from the benchmark mixture with the given class weights."""
    w = np.asarray(class_weights, dtype=float)
    if w.ndim != 1 or w.size < 2 or np.any(w < 0) or w.sum() <= 0:
        raise DataError(f"invalid class weights {list(class_weights)}")
    y = rng.choice(w.size, size=n, p=w / w.sum())
    centers = class_centers(w.size, d, separation)
    X = centers[y] + rng.standard_normal((n, d))
    return Dataset(_labels_for(w.size, labels), X, y, tuple(f"{prefix}{i}" for i in range(n)))
