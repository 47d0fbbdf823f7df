"""Calibration and accuracy metrics, reliability curves and consistency bands."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .distributions import (
    GaussianMixture,
    QuantileGrid,
    cdf,
    crps_grid,
    crps_mixture,
    logpdf,
    quantile,
    quantile_score,
    sharpness_std,
)

DEFAULT_PCE_LEVELS = 100
DEFAULT_CRPS_LEVELS = 64


def pce_levels(m: int) -> np.ndarray:
    """Interior equidistant grid ``j / (m + 1)``, ``j = 1..m``."""
    if m < 1:
        raise ValueError("the PCE grid needs at least one level")
    return np.arange(1, m + 1) / (m + 1)


def _as_pits(pit_values) -> np.ndarray:
    z = np.asarray(pit_values, dtype=np.float64).ravel()
    if z.size == 0:
        raise ValueError("at least one PIT value is required")
    if np.any(~(z >= 0)) or np.any(~(z <= 1)):
        raise ValueError("PIT values must lie in [0, 1]")
    return z


def empirical_pit_cdf(pit_values, grid) -> np.ndarray:
    z = np.sort(_as_pits(pit_values))
    return np.searchsorted(z, np.asarray(grid, dtype=np.float64), side="right") / z.shape[0]


def pce(pit_values, m: int = DEFAULT_PCE_LEVELS, p: float = 1.0) -> float:
    """Probabilistic calibration error ``mean_j |alpha_j - F_Z(alpha_j)|^p`` (no ``1/p`` root)."""
    if not p > 0:
        raise ValueError("p must be positive")
    levels = pce_levels(m)
    return float(np.mean(np.abs(levels - empirical_pit_cdf(pit_values, levels)) ** p))


def quantile_calibration_error(pit_values) -> float:
    """Exact ``int_0^1 |Q_Z(a) - a| da`` for the empirical PIT quantile ``Q_Z(a) = Z_(ceil(N a))``.

    For p = 1 this is the same 1-Wasserstein distance that PCE approximates on a grid.
    """
    z = np.sort(_as_pits(pit_values))
    n = z.shape[0]
    a = np.arange(n) / n
    b = np.arange(1, n + 1) / n

    def antiderivative(t):
        return 0.5 * (t - z) * np.abs(t - z)

    return float(np.sum(antiderivative(b) - antiderivative(a)))


@dataclass(frozen=True)
class ReliabilityCurve:
    grid: np.ndarray
    empirical: np.ndarray
    band_low: np.ndarray | None = None
    band_high: np.ndarray | None = None

    def with_band(self, low, high) -> "ReliabilityCurve":
        return ReliabilityCurve(self.grid, self.empirical, np.asarray(low), np.asarray(high))

    def to_dict(self) -> dict:
        out = {"alpha": self.grid.tolist(), "empirical": self.empirical.tolist()}
        if self.band_low is not None:
            out["band_low"] = self.band_low.tolist()
            out["band_high"] = self.band_high.tolist()
        return out

    def to_csv_rows(self) -> list[tuple]:
        low = self.band_low if self.band_low is not None else [None] * len(self.grid)
        high = self.band_high if self.band_high is not None else [None] * len(self.grid)
        return list(zip(self.grid.tolist(), self.empirical.tolist(), list(low), list(high)))


def reliability_curve(pit_values, grid) -> ReliabilityCurve:
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0:
        return ReliabilityCurve(grid, np.empty(0))
    if np.any(np.diff(grid) < 0) or grid[0] < 0 or grid[-1] > 1:
        raise ValueError("reliability grid must be ascending within [0, 1]")
    return ReliabilityCurve(grid, empirical_pit_cdf(pit_values, grid))


def consistency_band(n: int, level: float, grid, sims: int = 1000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise consistency band for the empirical CDF of ``n`` uniform PITs.

    The joint law of the empirical CDF on ``grid`` is simulated exactly through
    multinomial counts of uniforms falling between consecutive grid points.
    """
    if not 0 < level < 1:
        raise ValueError("band level must lie in (0, 1)")
    if sims < 1000:
        raise ValueError("at least 1000 simulations are required")
    if n < 1:
        raise ValueError("n must be positive")
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0:
        return np.empty(0), np.empty(0)
    edges = np.clip(grid, 0.0, 1.0)
    probs = np.diff(np.concatenate([[0.0], edges, [1.0]]))
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, np.maximum(probs, 0.0), size=sims)
    ecdf = np.cumsum(counts[:, :-1], axis=1) / n
    tail = (1.0 - level) / 2.0
    low, high = np.quantile(ecdf, [tail, 1.0 - tail], axis=0)
    return low, high


@dataclass
class EvaluationReport:
    n: int
    pce: float
    crps: float
    nll: float | None
    std: float
    reliability: ReliabilityCurve
    nll_available: bool = True
    p_value: float | None = None
    dataset: str = ""
    model: str = ""
    method: str = ""
    seed: int = 0
    selected_lambda: float | None = None
    notes: list[str] = field(default_factory=list)

    METRICS = ("pce", "crps", "nll", "std", "p_value")

    def metric(self, name: str) -> float | None:
        return getattr(self, name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reliability"] = self.reliability.to_dict()
        return d


def _innermost_base(dist):
    while hasattr(dist, "base"):
        dist = dist.base
    return dist


def evaluate(
    dists,
    targets,
    *,
    pce_m: int = DEFAULT_PCE_LEVELS,
    crps_levels: int = DEFAULT_CRPS_LEVELS,
    curve_points: int = 100,
    band_level: float = 0.9,
    band_sims: int = 1000,
    band_seed: int = 0,
) -> EvaluationReport:
    """Mean CRPS / NLL / STD, PCE and the reliability curve of a batch of predictions.

    Mixtures use the closed-form CRPS and quantile grids their own levels. For
    recalibrated or conformalized predictions CRPS and STD are computed from
    the quantile function at ``crps_levels`` midpoint levels.
    """
    y = np.asarray(targets, dtype=np.float64).ravel()
    if len(dists) != y.shape[0]:
        raise ValueError(f"{len(dists)} predictions but {y.shape[0]} targets")
    notes: list[str] = []
    pits = np.clip(cdf(dists, y), 0.0, 1.0)

    if isinstance(dists, GaussianMixture):
        crps = float(np.mean(crps_mixture(dists, y)))
        std = float(np.mean(sharpness_std(dists)))
    elif isinstance(dists, QuantileGrid):
        crps = float(np.mean(crps_grid(dists, y)))
        std = float(np.mean(sharpness_std(dists)))
        notes.append("std of quantile-grid predictions uses the piecewise-linear CDF")
    else:
        levels = (np.arange(crps_levels) + 0.5) / crps_levels
        q = quantile(dists, levels[None, :])
        with np.errstate(invalid="ignore"):
            crps = float(np.mean(np.mean(quantile_score(levels, q, y[:, None]), axis=1)))
            per_point_std = np.where(np.all(np.isfinite(q), axis=1), np.std(q, axis=1), np.inf)
        std = float(np.mean(per_point_std))
        notes.append(f"crps and std from {crps_levels} quantile levels")

    if isinstance(_innermost_base(dists), QuantileGrid):
        nll, nll_available = None, False
        notes.append("nll unavailable for quantile predictions")
    else:
        with np.errstate(divide="ignore"):
            nll = float(np.mean(-logpdf(dists, y)))
        nll_available = True
        if not np.isfinite(nll):
            notes.append("nll is infinite: the predictive distribution has no density")

    grid = np.linspace(0.0, 1.0, curve_points)
    curve = reliability_curve(pits, grid)
    low, high = consistency_band(y.shape[0], band_level, grid, band_sims, band_seed)
    return EvaluationReport(
        n=int(y.shape[0]),
        pce=pce(pits, pce_m, 1.0),
        crps=crps,
        nll=nll,
        std=std,
        reliability=curve.with_band(low, high),
        nll_available=nll_available,
        notes=notes,
    )
