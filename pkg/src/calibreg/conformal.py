"""Inductive conformal prediction of left-interval quantiles.

Two conformity scores are supported. ``cqr`` uses the quantile residual
``y - Q(alpha0 | x)`` at a fixed level ``alpha0``; ``dcp`` uses the PIT
``F(y | x)``. Both are increasing in ``y``, so the calibrated quantile is the
score inverse at the order statistic ``S_(ceil((N'+1) alpha))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .calibration import order_index
from .distributions import QuantileGrid, cdf, quantile, quantile_closed


class ScoreKind(str, Enum):
    CQR = "cqr"
    DCP = "dcp"


@dataclass(frozen=True)
class ConformalCalibrator:
    kind: ScoreKind
    scores_sorted: np.ndarray
    alpha0: float | None = None
    fitted_on: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ScoreKind(self.kind))
        s = np.sort(np.asarray(self.scores_sorted, dtype=np.float64).ravel(), kind="stable")
        if s.size == 0:
            raise ValueError("at least one conformity score is required")
        if not np.all(np.isfinite(s)):
            raise ValueError("conformity scores must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "scores_sorted", s)
        if self.kind is ScoreKind.CQR:
            if self.alpha0 is None or not 0 < self.alpha0 < 1:
                raise ValueError("cqr scores need a quantile level alpha0 in (0, 1)")
            object.__setattr__(self, "alpha0", float(self.alpha0))
        elif self.alpha0 is not None:
            raise ValueError("alpha0 only applies to cqr scores")

    @property
    def n(self) -> int:
        return self.scores_sorted.shape[0]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "alpha0": self.alpha0,
            "scores": self.scores_sorted.tolist(),
            "fitted_on": self.fitted_on,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConformalCalibrator":
        return cls(ScoreKind(d["kind"]), d["scores"], d.get("alpha0"), d.get("fitted_on"))


def conformity_scores(kind, dists, targets, alpha0: float | None = None) -> np.ndarray:
    kind = ScoreKind(kind)
    targets = np.asarray(targets, dtype=np.float64)
    if len(dists) != targets.shape[0]:
        raise ValueError(f"{len(dists)} predictions but {targets.shape[0]} targets")
    if kind is ScoreKind.CQR:
        if alpha0 is None:
            raise ValueError("cqr scores need alpha0")
        return targets - quantile(dists, alpha0)
    if alpha0 is not None:
        raise ValueError("alpha0 only applies to cqr scores")
    return cdf(dists, targets)


def fit_conformal(kind, dists, targets, alpha0: float | None = None, fitted_on: str | None = None) -> ConformalCalibrator:
    if fitted_on == "test":
        raise ValueError("conformity scores must not be computed on the test split")
    scores = conformity_scores(kind, dists, targets, alpha0)
    return ConformalCalibrator(ScoreKind(kind), scores, alpha0, fitted_on)


def conformal_threshold(cal: ConformalCalibrator, alpha) -> np.ndarray:
    """``S_(ceil((N'+1) alpha))`` among ``{S_1, ..., S_N', +inf}``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(~(alpha > 0)) or np.any(~(alpha <= 1)):
        raise ValueError("conformal level must lie in (0, 1]")
    ext = np.append(cal.scores_sorted, np.inf)
    return ext[np.minimum(order_index(cal.n, alpha), cal.n + 1) - 1]


def _expand_to(base: np.ndarray, batch_ndim: int, other: np.ndarray) -> np.ndarray:
    if other.ndim > batch_ndim:
        return base.reshape(base.shape + (1,) * (other.ndim - batch_ndim))
    return base


def conformalized_quantile(cal: ConformalCalibrator, dist, alpha) -> np.ndarray:
    """Calibrated quantile ``s^-1(q_hat | x)``; ``alpha`` follows the batch broadcasting convention."""
    alpha = np.asarray(alpha, dtype=np.float64)
    q_hat = conformal_threshold(cal, alpha)
    if cal.kind is ScoreKind.CQR:
        base = np.asarray(quantile(dist, cal.alpha0))
        return _expand_to(base, len(dist.batch_shape), alpha) + q_hat
    # the +inf order statistic is PIT level 1 in score space
    return quantile_closed(dist, np.minimum(q_hat, 1.0))


@dataclass(frozen=True)
class ConformalDistribution:
    """Predictive distribution implied by DCP conformalization at every level."""

    base: object
    cal: ConformalCalibrator

    def __post_init__(self):
        if self.cal.kind is not ScoreKind.DCP:
            raise ValueError("only dcp calibrators define a full predictive distribution")

    @property
    def batch_shape(self) -> tuple:
        return self.base.batch_shape

    def __len__(self) -> int:
        return len(self.base)

    def __getitem__(self, idx) -> "ConformalDistribution":
        return ConformalDistribution(self.base[idx], self.cal)

    def cdf(self, y) -> np.ndarray:
        z = cdf(self.base, y)
        return np.searchsorted(self.cal.scores_sorted, z, side="right") / (self.cal.n + 1)

    def quantile(self, alpha) -> np.ndarray:
        return conformalized_quantile(self.cal, self.base, alpha)

    def logpdf(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return np.full(np.broadcast_shapes(y.shape, self.batch_shape), -np.inf)

    def std(self, n_levels: int = 256) -> np.ndarray:
        levels = (np.arange(n_levels) + 0.5) / n_levels
        q = self.quantile(levels.reshape((1,) * len(self.batch_shape) + (-1,)))
        with np.errstate(invalid="ignore"):
            sd = np.std(q, axis=-1)
        return np.where(np.all(np.isfinite(q), axis=-1), sd, np.inf)


def conformalize_dcp(dist, cal: ConformalCalibrator) -> ConformalDistribution:
    return ConformalDistribution(dist, cal)


def fit_cqr_grid(grid: QuantileGrid, targets, fitted_on: str | None = None) -> list[ConformalCalibrator]:
    """One CQR calibrator per grid level, each using the residual at its own level."""
    targets = np.asarray(targets, dtype=np.float64)
    if fitted_on == "test":
        raise ValueError("conformity scores must not be computed on the test split")
    if len(grid) != targets.shape[0]:
        raise ValueError(f"{len(grid)} predictions but {targets.shape[0]} targets")
    return [
        ConformalCalibrator(ScoreKind.CQR, targets - grid.values[..., j], float(a), fitted_on)
        for j, a in enumerate(grid.levels)
    ]


def apply_cqr_grid(calibrators: list[ConformalCalibrator], grid: QuantileGrid) -> QuantileGrid:
    """Shift every grid level by its conformal threshold; crossings are re-sorted."""
    if len(calibrators) != grid.levels.shape[0]:
        raise ValueError("need exactly one calibrator per grid level")
    shifts = np.array([conformal_threshold(c, c.alpha0) for c in calibrators])
    if not np.all(np.isfinite(shifts)):
        worst = max(c.alpha0 for c, s in zip(calibrators, shifts) if not np.isfinite(s))
        raise ValueError(
            f"calibration set of size {calibrators[0].n} is too small to conformalize level {worst:g}"
        )
    return QuantileGrid(grid.levels, grid.values + shifts)
