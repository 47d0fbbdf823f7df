"""Quantile recalibration: calibration maps fitted on PIT values.

A calibration map ``phi: [0, 1] -> [0, 1]`` estimates the CDF of the PIT of
a base model; composing it with the base CDF gives the recalibrated CDF
``phi(F(y | x))``, and the recalibrated quantile function is
``Q(phi^-1(alpha) | x)``.

Map kinds:

* ``emp``: empirical CDF of the PITs (a step function).
* ``dcp``: empirical CDF with ``N' + 1`` in the denominator. Recalibrating with
  this map gives exactly distributional conformal prediction.
* ``lin``: linear interpolation through ``(0, 0)``, ``(Z_(k), k / (N' + 1))``, ``(1, 1)``.
* ``kde``: logistic-kernel smoothing of the empirical CDF with inverse bandwidth ``tau``,
  rescaled so that ``phi(0) = 0`` and ``phi(1) = 1``. Without the rescaling the
  kernels leak mass outside ``[0, 1]`` and the recalibrated distribution would
  put mass at +-inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit, logsumexp

from .distributions import cdf as base_cdf
from .distributions import logpdf as base_logpdf
from .distributions import quantile_closed

DEFAULT_TAU = 100.0

# elements per block when a map is evaluated against every PIT at once
_BLOCK = 1 << 22


class MapKind(str, Enum):
    EMP = "emp"
    LIN = "lin"
    KDE = "kde"
    DCP = "dcp"


def order_index(n: int, alpha, plus_one: bool = True) -> np.ndarray:
    """1-based order-statistic index ``ceil((n + 1) * alpha)`` (or ``ceil(n * alpha)``).

    The product is rounded to 9 decimals before the ceiling so that values
    like ``100 * 0.3 = 30.000000000000004`` select index 30, not 31.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    x = (n + 1 if plus_one else n) * alpha
    return np.maximum(np.ceil(np.round(x, 9)).astype(np.int64), 1)


@dataclass(frozen=True)
class CalibrationMap:
    kind: MapKind
    pits_sorted: np.ndarray
    tau: float | None = None
    fitted_on: str | None = None
    _cache: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", MapKind(self.kind))
        z = np.sort(np.asarray(self.pits_sorted, dtype=np.float64).ravel())
        if z.size == 0:
            raise ValueError("a calibration map needs at least one PIT value")
        if np.any(~(z >= 0)) or np.any(~(z <= 1)):
            raise ValueError("PIT values must lie in [0, 1]")
        z.setflags(write=False)
        object.__setattr__(self, "pits_sorted", z)
        if self.kind is MapKind.KDE:
            if self.tau is None or not self.tau > 0:
                raise ValueError("the kde map requires a positive tau")
            object.__setattr__(self, "tau", float(self.tau))
            ends = _kde_raw(self, np.array([0.0, 1.0]))
            object.__setattr__(self, "_cache", (ends[0], ends[1]))
        elif self.tau is not None:
            raise ValueError(f"tau only applies to the kde map, not {self.kind.value}")
        if self.kind is MapKind.LIN:
            object.__setattr__(self, "_cache", _lin_knots(z))

    @property
    def n(self) -> int:
        return self.pits_sorted.shape[0]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "tau": self.tau,
            "pits": self.pits_sorted.tolist(),
            "fitted_on": self.fitted_on,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationMap":
        return cls(MapKind(d["kind"]), d["pits"], d.get("tau"), d.get("fitted_on"))


def _lin_knots(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = z.shape[0]
    pos = np.arange(1, n + 1) / (n + 1)
    # tied PITs collapse into one knot at the mean of their plotting positions
    uniq, inv = np.unique(z, return_inverse=True)
    heights = np.bincount(inv, weights=pos) / np.bincount(inv)
    inner = (uniq > 0) & (uniq < 1)
    kx = np.concatenate([[0.0], uniq[inner], [1.0]])
    ky = np.concatenate([[0.0], heights[inner], [1.0]])
    return kx, ky


def fit_calibration_map(kind, pit_values, tau: float | None = None, fitted_on: str | None = None) -> CalibrationMap:
    """Fit a calibration map on PIT values from a held-out split.

    ``fitted_on`` tags the split the PITs came from; fitting on the test split
    is refused.
    """
    if fitted_on == "test":
        raise ValueError("calibration maps must not be fitted on the test split")
    return CalibrationMap(MapKind(kind), pit_values, tau, fitted_on)


def _kde_blocks(cmap: CalibrationMap, alpha: np.ndarray, fn) -> np.ndarray:
    flat = alpha.ravel()
    z = cmap.pits_sorted
    step = max(1, _BLOCK // z.shape[0])
    out = np.empty_like(flat)
    for start in range(0, flat.shape[0], step):
        u = cmap.tau * (flat[start:start + step, None] - z[None, :])
        out[start:start + step] = fn(u)
    return out.reshape(alpha.shape)


def map_apply(cmap: CalibrationMap, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    z = cmap.pits_sorted
    if cmap.kind is MapKind.EMP:
        return np.searchsorted(z, alpha, side="right") / cmap.n
    if cmap.kind is MapKind.DCP:
        return np.searchsorted(z, alpha, side="right") / (cmap.n + 1)
    if cmap.kind is MapKind.LIN:
        kx, ky = cmap._cache
        return np.interp(alpha, kx, ky)
    lo, hi = cmap._cache
    return (_kde_raw(cmap, alpha) - lo) / (hi - lo)


def _kde_raw(cmap: CalibrationMap, alpha: np.ndarray) -> np.ndarray:
    return _kde_blocks(cmap, alpha, lambda u: expit(u).mean(axis=1))


def map_log_derivative(cmap: CalibrationMap, alpha) -> np.ndarray:
    """Log of ``d phi / d alpha``; -inf for the step maps (their density is zero a.e.)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if cmap.kind is MapKind.KDE:
        lo, hi = cmap._cache
        log_scale = np.log(cmap.tau) - np.log(cmap.n) - np.log(hi - lo)
        # sigma(u) (1 - sigma(u)) = exp(-softplus(u) - softplus(-u))
        return log_scale + _kde_blocks(
            cmap, alpha, lambda u: logsumexp(-np.logaddexp(0.0, u) - np.logaddexp(0.0, -u), axis=1)
        )
    if cmap.kind is MapKind.LIN:
        kx, ky = cmap._cache
        j = np.clip(np.searchsorted(kx, alpha, side="right") - 1, 0, kx.shape[0] - 2)
        return np.log((ky[j + 1] - ky[j]) / (kx[j + 1] - kx[j]))
    return np.full(alpha.shape, -np.inf)


def map_inverse(cmap: CalibrationMap, alpha) -> np.ndarray:
    """Generalized inverse ``inf{t in [0, 1] : phi(t) >= alpha}`` for ``alpha`` in (0, 1].

    For ``dcp`` this is ``Z'_(ceil((N'+1) alpha))`` with the order statistic
    ``N' + 1`` (the conformal ``+inf``) represented by the PIT value 1. The
    ``kde`` map is strictly increasing and is inverted by bisection.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(~(alpha > 0)) or np.any(~(alpha <= 1)):
        raise ValueError("map_inverse is defined for levels in (0, 1]")
    z = cmap.pits_sorted
    if cmap.kind is MapKind.DCP:
        ext = np.append(z, 1.0)
        return ext[np.minimum(order_index(cmap.n, alpha), cmap.n + 1) - 1]
    if cmap.kind is MapKind.EMP:
        return z[np.minimum(order_index(cmap.n, alpha, plus_one=False), cmap.n) - 1]
    if cmap.kind is MapKind.LIN:
        kx, ky = cmap._cache
        return np.interp(alpha, ky, kx)
    lo = np.zeros_like(alpha)
    hi = np.ones_like(alpha)
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        go_right = map_apply(cmap, mid) < alpha
        lo = np.where(go_right, mid, lo)
        hi = np.where(go_right, hi, mid)
    return np.where(alpha >= 1.0, 1.0, 0.5 * (lo + hi))


@dataclass(frozen=True)
class RecalibratedDistribution:
    """Base predictive distribution composed with a calibration map."""

    base: object
    map: CalibrationMap

    @property
    def batch_shape(self) -> tuple:
        return self.base.batch_shape

    def __len__(self) -> int:
        return len(self.base)

    def __getitem__(self, idx) -> "RecalibratedDistribution":
        return RecalibratedDistribution(self.base[idx], self.map)

    def cdf(self, y) -> np.ndarray:
        return map_apply(self.map, base_cdf(self.base, y))

    def quantile(self, alpha) -> np.ndarray:
        """Recalibrated quantile; may be +-inf where the map inverse hits 0 or 1 on unbounded bases."""
        return quantile_closed(self.base, map_inverse(self.map, alpha))

    def logpdf(self, y) -> np.ndarray:
        if self.map.kind in (MapKind.EMP, MapKind.DCP):
            y = np.asarray(y, dtype=np.float64)
            return np.full(np.broadcast_shapes(y.shape, self.batch_shape), -np.inf)
        return map_log_derivative(self.map, base_cdf(self.base, y)) + base_logpdf(self.base, y)

    def nll(self, y) -> np.ndarray:
        return -self.logpdf(y)

    def std(self, n_levels: int = 256) -> np.ndarray:
        levels = (np.arange(n_levels) + 0.5) / n_levels
        q = self.quantile(levels.reshape((1,) * len(self.batch_shape) + (-1,)))
        with np.errstate(invalid="ignore"):
            sd = np.std(q, axis=-1)
        return np.where(np.all(np.isfinite(q), axis=-1), sd, np.inf)


def recalibrate(dist, cmap: CalibrationMap) -> RecalibratedDistribution:
    return RecalibratedDistribution(dist, cmap)
