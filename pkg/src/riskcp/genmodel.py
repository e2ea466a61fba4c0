"""Conformalized GAN ensemble for tabular features, and evolved-dataset assembly.

An ensemble of M generator/discriminator MLP pairs is trained on bootstrap
resamples of one class. A conformal interval over the ensemble-mean
discriminator score of held-out real rows then gates the discriminator:
a row whose score falls outside the interval is called synthetic.

Backprop is written by hand and checked against finite differences in the
test-suite; training uses momentum SGD with the non-saturating GAN loss.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import ks_2samp

from riskcp.core import DataError, Dataset, make_rng

logger = logging.getLogger(__name__)

__all__ = [
    "Mlp",
    "GanTrainConfig",
    "GanEnsemble",
    "DivergenceError",
    "gan_losses",
    "gan_fit",
    "gan_sample",
    "conformalized_discriminate",
    "select_fraction",
    "samples_to_dataset",
    "assemble_evolved",
    "compare_marginals",
]


class DivergenceError(RuntimeError):
    pass


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


_ACT = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "linear": (lambda z: z, lambda a: np.ones_like(a)),
    "sigmoid": (_sigmoid, lambda a: a * (1.0 - a)),
}


class Mlp:
    """Fully connected net; layer ``l`` computes ``act_l(a @ W_l + b_l)``.

    ``raw=True`` in :meth:`forward` / :meth:`backward` skips the output
    activation (used for discriminator logits).
    """

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], weights=None, biases=None, rng=None):
        self.sizes = [int(s) for s in sizes]
        self.activations = list(activations)
        if len(self.sizes) < 2 or len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need one activation per layer")
        for a in self.activations:
            if a not in _ACT:
                raise ValueError(f"unknown activation {a!r}")
        if weights is None:
            rng = rng if rng is not None else make_rng(0)
            weights = [
                rng.normal(0.0, math.sqrt(2.0 / (i + o)), size=(i, o))
                for i, o in zip(self.sizes[:-1], self.sizes[1:])
            ]
            biases = [np.zeros(o) for o in self.sizes[1:]]
        self.W = [np.array(w, dtype=float).reshape(i, o) for w, i, o in zip(weights, self.sizes[:-1], self.sizes[1:])]
        self.b = [np.array(b, dtype=float).reshape(o) for b, o in zip(biases, self.sizes[1:])]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.W, self.b) for p in pair]

    def forward(self, X, raw: bool = False, cache: list | None = None):
        a = np.asarray(X, dtype=float)
        last = len(self.W) - 1
        for l, (W, b, act) in enumerate(zip(self.W, self.b, self.activations)):
            if cache is not None:
                cache.append(a)
            z = a @ W + b
            a = z if (raw and l == last) else _ACT[act][0](z)
            if cache is not None:
                cache.append(a)
        return a

    def backward(self, cache: list, grad_out: np.ndarray, raw: bool = False):
        """Return ``(param grads in `params` order, grad wrt input)``."""
        g = grad_out
        grads = [None] * (2 * len(self.W))
        last = len(self.W) - 1
        for l in range(last, -1, -1):
            a_in, a_out = cache[2 * l], cache[2 * l + 1]
            if not (raw and l == last):
                g = g * _ACT[self.activations[l]][1](a_out)
            grads[2 * l] = a_in.T @ g
            grads[2 * l + 1] = g.sum(axis=0)
            g = g @ self.W[l].T
        return grads, g

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "activations": self.activations,
            "weights": [w.tolist() for w in self.W],
            "biases": [b.tolist() for b in self.b],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mlp":
        return cls(doc["sizes"], doc["activations"], doc["weights"], doc["biases"])


def gan_losses(G: Mlp, D: Mlp, real: np.ndarray, z: np.ndarray, want_d: bool = True, want_g: bool = True):
    """Discriminator and non-saturating generator losses with their gradients.

    Returns ``(d_loss, d_grads, g_loss, g_grads)``; gradients follow each
    net's ``params`` order and are ``None`` when not requested. Losses are
    batch means.
    """
    n_r, n_f = real.shape[0], z.shape[0]
    g_cache: list = []
    fake = G.forward(z, cache=g_cache)
    fake_cache: list = []
    l_fake = D.forward(fake, raw=True, cache=fake_cache)
    sf = _sigmoid(l_fake)

    d_loss = d_grads = g_loss = g_grads = None
    if want_d:
        real_cache: list = []
        l_real = D.forward(real, raw=True, cache=real_cache)
        d_loss = float(np.mean(_softplus(-l_real)) + np.mean(_softplus(l_fake)))
        gr, _ = D.backward(real_cache, (_sigmoid(l_real) - 1.0) / n_r, raw=True)
        gf, _ = D.backward(fake_cache, sf / n_f, raw=True)
        d_grads = [a + b for a, b in zip(gr, gf)]
    if want_g:
        g_loss = float(np.mean(_softplus(-l_fake)))
        _, dfake = D.backward(fake_cache, (sf - 1.0) / n_f, raw=True)
        g_grads, _ = G.backward(g_cache, dfake)
    return d_loss, d_grads, g_loss, g_grads


@dataclass(frozen=True)
class GanTrainConfig:
    m: int = 5
    noise_dim: int = 8
    hidden: int = 32
    epochs: int = 300
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    alpha: float = 0.1
    holdout: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.noise_dim < 1 or self.hidden < 1 or self.batch_size < 1:
            raise ValueError("m, noise_dim, hidden and batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not self.learning_rate > 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid optimizer settings")
        if not 0 < self.alpha < 1 or not 0 < self.holdout < 1:
            raise ValueError("alpha and holdout must be in (0, 1)")


@dataclass
class GanEnsemble:
    generators: list
    discriminators: list
    noise_dim: int
    mean: np.ndarray
    std: np.ndarray
    interval: tuple[float, float]
    alpha: float
    config: GanTrainConfig
    feature_names: tuple[str, ...] = ()
    label: str = ""

    def __post_init__(self):
        lo, hi = self.interval
        if not lo <= hi:
            raise ValueError(f"interval bounds out of order: {self.interval}")
        if len(self.generators) != len(self.discriminators) or not self.generators:
            raise ValueError("need M >= 1 generator/discriminator pairs")

    @property
    def m(self) -> int:
        return len(self.generators)

    def score(self, X) -> np.ndarray:
        """Ensemble-mean discriminator probability of being real."""
        Xs = (np.atleast_2d(np.asarray(X, dtype=float)) - self.mean) / self.std
        return np.mean([D.forward(Xs)[:, 0] for D in self.discriminators], axis=0)

    def to_dict(self) -> dict:
        def enc(v):
            return None if math.isinf(v) else v

        return {
            "schema_version": "1",
            "label": self.label,
            "feature_names": list(self.feature_names),
            "noise_dim": self.noise_dim,
            "standardizer": {"means": self.mean.tolist(), "stds": self.std.tolist()},
            "interval": [enc(self.interval[0]), enc(self.interval[1])],
            "alpha": self.alpha,
            "config": asdict(self.config),
            "generators": [g.to_dict() for g in self.generators],
            "discriminators": [d.to_dict() for d in self.discriminators],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GanEnsemble":
        lo, hi = doc["interval"]
        return cls(
            [Mlp.from_dict(g) for g in doc["generators"]],
            [Mlp.from_dict(d) for d in doc["discriminators"]],
            int(doc["noise_dim"]),
            np.asarray(doc["standardizer"]["means"], dtype=float),
            np.asarray(doc["standardizer"]["stds"], dtype=float),
            (-math.inf if lo is None else lo, math.inf if hi is None else hi),
            float(doc["alpha"]),
            GanTrainConfig(**doc["config"]),
            tuple(doc.get("feature_names", ())),
            doc.get("label", ""),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "GanEnsemble":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _train_pair(member: int, data: np.ndarray, cfg: GanTrainConfig):
    rng = make_rng(cfg.seed, 100 + member)
    n, d = data.shape
    boot = data[rng.integers(0, n, size=n)]
    G = Mlp([cfg.noise_dim, cfg.hidden, cfg.hidden, d], ["tanh", "tanh", "linear"], rng=rng)
    D = Mlp([d, cfg.hidden, cfg.hidden, 1], ["tanh", "tanh", "sigmoid"], rng=rng)
    vel_g = [np.zeros_like(p) for p in G.params]
    vel_d = [np.zeros_like(p) for p in D.params]
    bs = min(cfg.batch_size, n)

    def step(params, vel, grads):
        for p, v, g in zip(params, vel, grads):
            v *= cfg.momentum
            v -= cfg.learning_rate * g
            p += v

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            real = boot[order[start:start + bs]]
            z = rng.standard_normal((bs, cfg.noise_dim))
            d_loss, d_grads, _, _ = gan_losses(G, D, real, z, want_g=False)
            step(D.params, vel_d, d_grads)
            z = rng.standard_normal((bs, cfg.noise_dim))
            _, _, g_loss, g_grads = gan_losses(G, D, real, z, want_d=False)
            step(G.params, vel_g, g_grads)
            if not (math.isfinite(d_loss) and math.isfinite(g_loss)):
                raise DivergenceError(f"member {member}: non-finite loss at epoch {epoch}")
        if not (G.all_finite() and D.all_finite()):
            raise DivergenceError(f"member {member}: non-finite parameters at epoch {epoch}")
    return G, D


def _conformal_interval(scores: np.ndarray, alpha: float) -> tuple[float, float]:
    """Two-sided split-conformal interval with ``alpha / 2`` in each tail."""
    s = np.sort(scores)
    n = s.size
    lo_rank = math.floor((n + 1) * (alpha / 2) + 1e-9)
    hi_rank = math.ceil((n + 1) * (1 - alpha / 2) - 1e-9)
    lo = -math.inf if lo_rank < 1 else float(s[lo_rank - 1])
    hi = math.inf if hi_rank > n else float(s[hi_rank - 1])
    return lo, hi


def gan_fit(real: Dataset, cfg: GanTrainConfig = GanTrainConfig(), threads: int = 1) -> GanEnsemble:
    """Train the ensemble on the rows of a single-class dataset.

    A ``cfg.holdout`` fraction of rows is kept out of training and used only
    to place the conformal interval on discriminator scores.
    """
    present = np.flatnonzero(real.class_counts())
    if present.size != 1:
        raise DataError(f"gan_fit needs rows of exactly one class, got {present.size} classes")
    n, d = real.X.shape
    if n < 2 * cfg.batch_size:
        raise DataError(f"need at least {2 * cfg.batch_size} rows for batch size {cfg.batch_size}, got {n}")
    rng = make_rng(cfg.seed, 0)
    perm = rng.permutation(n)
    n_hold = max(1, int(round(n * cfg.holdout)))
    hold, fit = perm[:n_hold], perm[n_hold:]
    mean = real.X[fit].mean(axis=0)
    std = real.X[fit].std(axis=0)
    std[~(std > 0)] = 1.0
    data = (real.X[fit] - mean) / std

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(lambda m: _train_pair(m, data, cfg), range(cfg.m)))
    else:
        pairs = [_train_pair(m, data, cfg) for m in range(cfg.m)]

    ens = GanEnsemble(
        [g for g, _ in pairs], [dd for _, dd in pairs], cfg.noise_dim, mean, std,
        (-math.inf, math.inf), cfg.alpha, cfg, real.feature_names, real.labels[present[0]],
    )
    ens.interval = _conformal_interval(ens.score(real.X[hold]), cfg.alpha)
    if cfg.epochs == 0:
        logger.warning("epochs=0: ensemble holds untrained networks")
    return ens


def gan_sample(ens: GanEnsemble, n: int, seed: int = 0) -> np.ndarray:
    """``n`` rows in feature space, each from a uniformly chosen ensemble member."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = make_rng(seed, 0)
    who = rng.integers(0, ens.m, size=n)
    z = rng.standard_normal((n, ens.noise_dim))
    out = np.empty((n, ens.mean.size))
    for m, G in enumerate(ens.generators):
        rows = who == m
        if rows.any():
            out[rows] = G.forward(z[rows])
    return out * ens.std + ens.mean


def conformalized_discriminate(ens: GanEnsemble, X):
    """``(score, synthetic)`` arrays; synthetic means score outside the interval."""
    s = ens.score(X)
    lo, hi = ens.interval
    return s, (s < lo) | (s > hi)


def select_fraction(X: np.ndarray, fraction: float, seed: int = 0) -> np.ndarray:
    """Uniform random subset of ``round(n * fraction)`` rows, original order kept."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    X = np.asarray(X)
    k = int(round(X.shape[0] * fraction))
    idx = np.sort(make_rng(seed, 7).choice(X.shape[0], size=k, replace=False))
    return X[idx]


def samples_to_dataset(X, label: str, labels: Sequence[str], feature_names=(), prefix: str = "gen-") -> Dataset:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    labels = tuple(labels)
    y = np.full(X.shape[0], labels.index(label))
    return Dataset(labels, X, y, tuple(f"{prefix}{i}" for i in range(X.shape[0])), tuple(feature_names))


def _gen_rows(gen, d: int, tag: str):
    if gen is None:
        return np.zeros((0, d)), ()
    if isinstance(gen, Dataset):
        ids = tuple(i if i.startswith("gen-") else f"gen-{i}" for i in gen.ids)
        return gen.X, ids
    X = np.asarray(gen, dtype=float).reshape(-1, d)
    return X, tuple(f"gen-{tag}-{i}" for i in range(X.shape[0]))


def assemble_evolved(
    source: Dataset,
    generated_ti=None,
    generated_tf=None,
    tf: str = "TF",
    ti: str = "TI",
    evolved: str = "T-EV",
) -> Dataset:
    """Relabel source + generated rows into ``(tf, ti, evolved)``.

    Trojan-free keeps source and generated TF rows, TI keeps only source TI
    rows, and generated TI rows become the evolved class.
    """
    for lab in (tf, ti):
        if lab not in source.labels:
            raise DataError(f"source dataset lacks label {lab!r}")
    d = source.n_features
    gti, ids_ti = _gen_rows(generated_ti, d, "ti")
    gtf, ids_tf = _gen_rows(generated_tf, d, "tf")
    src_mask = np.isin(source.y, [source.label_index(tf), source.label_index(ti)])
    src = source.subset(np.flatnonzero(src_mask))
    remap = {source.label_index(tf): 0, source.label_index(ti): 1}
    y_src = np.array([remap[int(v)] for v in src.y], dtype=np.int64)
    X = np.vstack([src.X, gtf, gti])
    y = np.concatenate([y_src, np.zeros(len(gtf), dtype=np.int64), np.full(len(gti), 2, dtype=np.int64)])
    ids = src.ids + ids_tf + ids_ti
    if len(set(ids)) != len(ids):
        raise DataError("duplicate ids after assembling the evolved dataset")
    return Dataset((tf, ti, evolved), X, y, ids, source.feature_names)


def compare_marginals(real, synth) -> list[dict]:
    """Per-feature mean difference (synth - real), stddev ratio and KS statistic."""
    R = real.X if isinstance(real, Dataset) else np.atleast_2d(np.asarray(real, dtype=float))
    S = synth.X if isinstance(synth, Dataset) else np.atleast_2d(np.asarray(synth, dtype=float))
    if R.shape[1] != S.shape[1]:
        raise DataError(f"dimension mismatch: {R.shape[1]} vs {S.shape[1]}")
    names = real.feature_names if isinstance(real, Dataset) else tuple(f"f{j}" for j in range(R.shape[1]))
    rows = []
    for j, name in enumerate(names):
        r, s = R[:, j], S[:, j]
        sr = r.std()
        rows.append({
            "feature": name,
            "mean_diff": float(s.mean() - r.mean()),
            "std_ratio": float(s.std() / sr) if sr > 0 else (1.0 if s.std() == 0 else math.inf),
            "ks": float(ks_2samp(r, s).statistic),
        })
    return rows
