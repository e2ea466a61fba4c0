"""Calibrated explanations for rejected (empty-set) decisions.

Pipeline: Gaussian perturbations around the rejected instance, conformal
p-values for every perturbation, one kernel-weighted linear surrogate per
class fitted to those p-values, and split-conformal reliability intervals
on the surrogate coefficients.

The interval for coefficient ``j`` of class ``k`` is built in two steps.
Half the perturbations fit a surrogate whose absolute residuals on the
other half give a conformal band ``q`` (the ``1 - alpha`` quantile). The
band is then pushed through the full-data weighted least-squares map
``B``: any target vector within ``+-q`` of the observed p-values moves
coefficient ``j`` by at most ``q * sum_i |B_ji|``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from riskcp.conformal import dataset_pvalues, predict
from riskcp.core import make_rng
from riskcp.setpredictors import conformal_quantile

logger = logging.getLogger(__name__)

__all__ = [
    "PerturbConfig",
    "Surrogate",
    "AttributionIntervals",
    "Explanation",
    "NotRejectedError",
    "SurrogateError",
    "perturb",
    "local_surrogate",
    "calibrate_attributions",
    "explain_reject",
]

RIDGE = 1e-6


class NotRejectedError(ValueError):
    """The instance has a nonempty prediction set, so there is nothing to explain."""


class SurrogateError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbConfig:
    n_perturb: int = 200
    sigma_scale: float = 0.1
    kernel_width: float | None = None  # None -> 0.75 * sqrt(d)
    top_j: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_perturb < 20:
            raise ValueError("need at least 20 perturbations")
        if self.sigma_scale < 0:
            raise ValueError("sigma_scale must be nonnegative")
        if self.kernel_width is not None and not self.kernel_width > 0:
            raise ValueError("kernel width must be positive")
        if self.top_j < 1:
            raise ValueError("top_j must be >= 1")

    def width(self, d: int) -> float:
        return self.kernel_width if self.kernel_width is not None else 0.75 * math.sqrt(d)


def perturb(x, scale, cfg: PerturbConfig) -> np.ndarray:
    """``n_perturb`` rows ``x + eps`` with ``eps_j ~ N(0, (sigma_scale * scale_j)^2)``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), x.shape)
    if np.any(scale <= 0):
        raise ValueError("perturbation scales must be positive")
    eps = make_rng(cfg.seed, 11).standard_normal((cfg.n_perturb, x.size))
    return x + eps * (cfg.sigma_scale * scale)


@dataclass(frozen=True)
class Surrogate:
    """Linear model of one class's p-value in standardized offsets from x."""

    weights: np.ndarray
    intercept: float
    r2: float
    ridge: bool = False

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return self.intercept + Z @ self.weights


def _design(perturbed, x, scale, cfg):
    X = np.atleast_2d(np.asarray(perturbed, dtype=float))
    x = np.asarray(x, dtype=float).reshape(-1)
    scale = np.ones_like(x) if scale is None else np.broadcast_to(np.asarray(scale, dtype=float), x.shape)
    Z = (X - x) / scale
    w = np.exp(-np.sum(Z * Z, axis=1) / cfg.width(x.size) ** 2)
    return Z, w


def _wls_operator(Z, w):
    """Return ``(B, ridge)`` with ``beta = B @ target`` for intercept-augmented WLS."""
    A = np.hstack([np.ones((Z.shape[0], 1)), Z])
    AtW = A.T * w
    M = AtW @ A
    ridge = np.linalg.matrix_rank(M) < M.shape[0] or np.linalg.cond(M) > 1e12
    if ridge:
        reg = np.eye(M.shape[0]) * RIDGE
        reg[0, 0] = 0.0
        M = M + reg
    try:
        return np.linalg.solve(M, AtW), ridge
    except np.linalg.LinAlgError as exc:
        raise SurrogateError(f"surrogate normal equations are singular: {exc}") from None


def _fit(Z, w, pvals):
    B, ridge = _wls_operator(Z, w)
    beta = B @ pvals
    out = []
    for k in range(pvals.shape[1]):
        pred = beta[0, k] + Z @ beta[1:, k]
        t = pvals[:, k]
        mu = np.sum(w * t) / np.sum(w)
        ss_tot = np.sum(w * (t - mu) ** 2)
        ss_res = np.sum(w * (t - pred) ** 2)
        # constant target: a zero-slope fit is exact
        r2 = 1.0 if ss_tot <= 1e-30 else float(1.0 - ss_res / ss_tot)
        out.append(Surrogate(beta[1:, k].copy(), float(beta[0, k]), r2, ridge))
    return out, B


def local_surrogate(perturbed, pvals, x, cfg: PerturbConfig = PerturbConfig(), scale=None) -> list[Surrogate]:
    """Per-class weighted least squares of p-values on standardized offsets.

    Kernel weights are ``exp(-||z||^2 / width^2)`` with ``z = (x_j - x) / scale``;
    coefficients are per unit of ``scale``. Falls back to a ``1e-6`` ridge
    when the normal equations are singular.
    """
    pvals = np.atleast_2d(np.asarray(pvals, dtype=float))
    Z, w = _design(perturbed, x, scale, cfg)
    if Z.shape[0] != pvals.shape[0]:
        raise ValueError(f"{Z.shape[0]} perturbations but {pvals.shape[0]} p-value rows")
    if Z.shape[0] < Z.shape[1] + 2:
        raise ValueError(f"need at least d + 2 = {Z.shape[1] + 2} perturbations, got {Z.shape[0]}")
    fits, _ = _fit(Z, w, pvals)
    if fits[0].ridge:
        logger.warning("singular surrogate design; used ridge %.0e", RIDGE)
    return fits


@dataclass(frozen=True)
class AttributionIntervals:
    """Reliability intervals for one class's surrogate coefficients."""

    lo: np.ndarray
    hi: np.ndarray
    residual_quantile: float


def calibrate_attributions(perturbed, pvals, x, surrogates, alpha: float, cfg: PerturbConfig = PerturbConfig(), scale=None):
    """Split-conformal reliability interval for every (class, feature) coefficient."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    pvals = np.atleast_2d(np.asarray(pvals, dtype=float))
    Z, w = _design(perturbed, x, scale, cfg)
    n = Z.shape[0]
    if n < 40:
        raise ValueError(f"need at least 40 perturbations to split, got {n}")
    order = make_rng(cfg.seed, 12).permutation(n)
    half_a, half_b = order[: n // 2], order[n // 2:]
    fits_a, _ = _fit(Z[half_a], w[half_a], pvals[half_a])
    B, _ = _wls_operator(Z, w)
    spread = np.abs(B[1:]).sum(axis=1)
    out = []
    for k, (full, part) in enumerate(zip(surrogates, fits_a)):
        resid = np.abs(pvals[half_b, k] - part.predict(Z[half_b]))
        q = conformal_quantile(resid, alpha)
        half = q * spread if math.isfinite(q) else np.full(spread.shape, math.inf)
        out.append(AttributionIntervals(full.weights - half, full.weights + half, q))
    return out


@dataclass(frozen=True)
class Explanation:
    id: str
    alpha: float
    labels: tuple[str, ...]
    p_values: tuple[float, ...]
    attributions: tuple[dict, ...]
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def enc(v):
            return None if not math.isfinite(v) else v

        return {
            "schema_version": "1",
            "id": self.id,
            "alpha": self.alpha,
            "rejected": True,
            "p_values": dict(zip(self.labels, self.p_values)),
            "attributions": [
                {**a, "lo": enc(a["lo"]), "hi": enc(a["hi"])} for a in self.attributions
            ],
            "diagnostics": self.diagnostics,
        }

    def summary(self) -> str:
        ps = ", ".join(f"{lab}={p:.3f}" for lab, p in zip(self.labels, self.p_values))
        lines = [f"{self.id}: rejected at alpha={self.alpha} (p-values {ps})"]
        for a in self.attributions:
            lines.append(
                f"  {a['class']:>8} {a['feature']:>12} {a['weight']:+.4f} "
                f"[{a['lo']:+.4f}, {a['hi']:+.4f}] {a['direction']}"
            )
        return "\n".join(lines)


def explain_reject(model, table, x, alpha: float, cfg: PerturbConfig = PerturbConfig(), smoothed: bool = False, instance_id: str = "") -> Explanation:
    """Explain why ``x`` gets an empty prediction set at ``alpha``.

    Raises :class:`NotRejectedError` if the set is nonempty. Neither the
    model nor the calibration table is modified.
    """
    if hasattr(x, "features"):
        instance_id = instance_id or x.id
        x = x.features
    x = np.asarray(x, dtype=float).reshape(-1)
    rec = predict(model, table, x, alpha, smoothed, instance_id)
    if not rec.rejected:
        raise NotRejectedError(
            f"not a rejection: {instance_id or 'instance'} has prediction set "
            f"{list(rec.set_labels(model.labels))} at alpha={alpha}"
        )
    scale = model.feature_scale()
    Xp = perturb(x, scale, cfg)
    P = dataset_pvalues(model, table, Xp, smoothed)
    surrogates = local_surrogate(Xp, P, x, cfg, scale)
    intervals = calibrate_attributions(Xp, P, x, surrogates, alpha, cfg, scale)

    rows = []
    names = model.feature_names
    for k, (sur, iv) in enumerate(zip(surrogates, intervals)):
        top = sorted(range(len(names)), key=lambda j: (-abs(sur.weights[j]), j))[: cfg.top_j]
        for j in top:
            wgt = float(sur.weights[j])
            rows.append({
                "feature": names[j],
                "class": model.labels[k],
                "weight": wgt,
                "lo": float(iv.lo[j]),
                "hi": float(iv.hi[j]),
                "direction": "toward" if wgt > 0 else ("away" if wgt < 0 else "none"),
            })
    diagnostics = {
        "r2": {lab: s.r2 for lab, s in zip(model.labels, surrogates)},
        "residual_quantile": {
            lab: (iv.residual_quantile if math.isfinite(iv.residual_quantile) else None)
            for lab, iv in zip(model.labels, intervals)
        },
        "ridge_fallback": bool(surrogates[0].ridge),
        "n_perturb": cfg.n_perturb,
        "sigma_scale": cfg.sigma_scale,
        "kernel_width": cfg.width(x.size),
        "smoothed": smoothed,
    }
    return Explanation(rec.id, float(alpha), model.labels, rec.p_values, tuple(rows), diagnostics)
