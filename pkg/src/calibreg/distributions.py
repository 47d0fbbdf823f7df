"""Predictive distributions and their scoring primitives.

Two families are supported: Gaussian mixtures (produced by the MIX heads)
and quantile grids (produced by the SQR head). Both are batched: parameters
carry an arbitrary leading batch shape, one predictive distribution per
entry, so a whole test split is a single object.

Broadcasting convention for evaluation points ``y`` (or levels ``alpha``):
the leading ``batch.ndim`` axes of ``y`` are aligned with the batch, any
trailing axes are extra evaluation points for the same distribution. A
``y`` with fewer dimensions than the batch broadcasts the usual numpy way.
To evaluate the same levels ``a`` for every distribution of a batch of
shape ``(n,)``, pass ``a[None, :]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import logsumexp, ndtr

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianMixture:
    """Batch of mixtures ``sum_k w_k N(mu_k, sigma_k^2)``; last axis indexes components."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w, m, s = np.broadcast_arrays(
            np.atleast_1d(np.asarray(self.weights, dtype=np.float64)),
            np.atleast_1d(np.asarray(self.means, dtype=np.float64)),
            np.atleast_1d(np.asarray(self.stds, dtype=np.float64)),
        )
        if w.shape[-1] < 1:
            raise ValueError("a mixture needs at least one component")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s))):
            raise ValueError("mixture means and stds must be finite")
        if np.any(s <= 0):
            raise ValueError("mixture stds must be strictly positive")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > 1e-9):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "means", _frozen(m))
        object.__setattr__(self, "stds", _frozen(s))

    @classmethod
    def normal(cls, mean, std) -> "GaussianMixture":
        mean = np.asarray(mean, dtype=np.float64)[..., None]
        std = np.asarray(std, dtype=np.float64)[..., None]
        return cls(np.ones_like(mean), mean, std)

    @property
    def batch_shape(self) -> tuple:
        return self.means.shape[:-1]

    @property
    def n_components(self) -> int:
        return self.means.shape[-1]

    def __len__(self) -> int:
        return self.batch_shape[0] if self.batch_shape else 1

    def __getitem__(self, idx) -> "GaussianMixture":
        if not self.batch_shape:
            raise IndexError("cannot index an unbatched mixture")
        return GaussianMixture(self.weights[idx], self.means[idx], self.stds[idx])

    def affine(self, loc, scale) -> "GaussianMixture":
        """Distribution of ``loc + scale * Y``; ``scale`` must be positive."""
        loc = np.asarray(loc, dtype=np.float64)[..., None]
        scale = np.asarray(scale, dtype=np.float64)[..., None]
        return GaussianMixture(self.weights, loc + scale * self.means, scale * self.stds)


@dataclass(frozen=True)
class QuantileGrid:
    """Batch of predicted quantiles ``values[..., j]`` at shared ``levels[j]``.

    Values are sorted along the last axis at construction so crossing
    quantile predictions still define a valid distribution.
    """

    levels: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        levels = np.atleast_1d(np.asarray(self.levels, dtype=np.float64))
        values = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        if levels.ndim != 1:
            raise ValueError("levels must be one-dimensional")
        if np.any(levels <= 0) or np.any(levels >= 1):
            raise ValueError("quantile levels must lie in (0, 1)")
        if np.any(np.diff(levels) <= 0):
            raise ValueError("quantile levels must be strictly increasing")
        if values.shape[-1] != levels.shape[0]:
            raise ValueError(
                f"values have {values.shape[-1]} quantiles but there are {levels.shape[0]} levels"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("quantile values must be finite")
        object.__setattr__(self, "levels", _frozen(levels))
        object.__setattr__(self, "values", _frozen(np.sort(values, axis=-1)))

    @property
    def batch_shape(self) -> tuple:
        return self.values.shape[:-1]

    def __len__(self) -> int:
        return self.batch_shape[0] if self.batch_shape else 1

    def __getitem__(self, idx) -> "QuantileGrid":
        if not self.batch_shape:
            raise IndexError("cannot index an unbatched grid")
        return QuantileGrid(self.levels, self.values[idx])

    def affine(self, loc, scale) -> "QuantileGrid":
        return QuantileGrid(self.levels, np.asarray(loc)[..., None] + np.asarray(scale)[..., None] * self.values)

    def extended(self) -> tuple[np.ndarray, np.ndarray]:
        """Knots of the piecewise-linear CDF including the extrapolated endpoints.

        Returns ``(levels, values)`` with levels ``0, l_1..l_M, 1``. The tails use
        the slope between the outermost knots.
        """
        lv, v = self.levels, self.values
        if lv.shape[0] < 2:
            raise ValueError("a quantile grid needs at least two levels to define a CDF")
        slope = (v[..., -1] - v[..., 0]) / (lv[-1] - lv[0])
        lo = v[..., 0] - slope * lv[0]
        hi = v[..., -1] + slope * (1.0 - lv[-1])
        ext_v = np.concatenate([lo[..., None], v, hi[..., None]], axis=-1)
        ext_l = np.concatenate([[0.0], lv, [1.0]])
        return ext_l, ext_v


PredictiveDistribution = Union[GaussianMixture, QuantileGrid]


def _align(params: np.ndarray, batch_ndim: int, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reshape ``params`` (batch + (K,)) so that it broadcasts against ``y[..., None]``."""
    if y.ndim > batch_ndim:
        extra = y.ndim - batch_ndim
        params = params.reshape(params.shape[:-1] + (1,) * extra + params.shape[-1:])
    return params, y[..., None]


def _mixture_terms(gm: GaussianMixture, y) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    nb = len(gm.batch_shape)
    w, yy = _align(gm.weights, nb, y)
    m, _ = _align(gm.means, nb, y)
    s, _ = _align(gm.stds, nb, y)
    return w, m, s, yy


def mixture_cdf(gm: GaussianMixture, y) -> np.ndarray:
    w, m, s, yy = _mixture_terms(gm, y)
    out = np.sum(w * ndtr((yy - m) / s), axis=-1)
    return np.clip(out, 0.0, 1.0)


def mixture_logpdf(gm: GaussianMixture, y) -> np.ndarray:
    w, m, s, yy = _mixture_terms(gm, y)
    z = (yy - m) / s
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    return logsumexp(logw - 0.5 * z * z - np.log(s) - _LOG_SQRT_2PI, axis=-1)


def mixture_pdf(gm: GaussianMixture, y) -> np.ndarray:
    return np.exp(mixture_logpdf(gm, y))


def _check_open_unit(alpha: np.ndarray) -> None:
    if np.any(~(alpha > 0)) or np.any(~(alpha < 1)):
        raise ValueError("quantile level must lie in the open interval (0, 1)")


def mixture_quantile(gm: GaussianMixture, alpha) -> np.ndarray:
    """Invert the mixture CDF by bracketed bisection.

    The bracket starts at ``[min mu - 10 max sigma, max mu + 10 max sigma]`` and
    is widened until it contains the target level.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    _check_open_unit(alpha)
    w, m, s, a = _mixture_terms(gm, alpha)
    a = a[..., 0]
    shape = np.broadcast_shapes(a.shape, m.shape[:-1])
    smax = np.broadcast_to(s.max(axis=-1), shape)
    lo = np.broadcast_to(m.min(axis=-1), shape) - 10.0 * smax
    hi = np.broadcast_to(m.max(axis=-1), shape) + 10.0 * smax
    a = np.broadcast_to(a, shape)

    def cdf(t):
        return np.sum(w * ndtr((t[..., None] - m) / s), axis=-1)

    width = hi - lo
    for _ in range(64):
        below = cdf(lo) > a
        above = cdf(hi) < a
        if not (below.any() or above.any()):
            break
        lo = np.where(below, lo - width, lo)
        hi = np.where(above, hi + width, hi)
        width = 2.0 * width
    # |F(y) - alpha| <= max density * bracket width, and max density <= 1 / (sigma_min sqrt(2 pi))
    tol = 1e-12 * np.broadcast_to(s.min(axis=-1), shape)
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        stuck = (mid == lo) | (mid == hi)
        go_right = cdf(mid) < a
        lo = np.where(go_right, mid, lo)
        hi = np.where(go_right, hi, mid)
        if np.all((hi - lo <= tol) | stuck):
            break
    return 0.5 * (lo + hi)


def _grid_align(qg: QuantileGrid, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    ext_l, ext_v = qg.extended()
    ext_v, yy = _align(ext_v, len(qg.batch_shape), y)
    shape = np.broadcast_shapes(yy.shape[:-1], ext_v.shape[:-1])
    ext_v = np.broadcast_to(ext_v, shape + ext_v.shape[-1:])
    return ext_l, ext_v, np.broadcast_to(yy[..., 0], shape)


def grid_cdf(qg: QuantileGrid, y) -> np.ndarray:
    """Right-continuous piecewise-linear CDF through the (extended) quantile knots."""
    ext_l, ext_v, yy = _grid_align(qg, y)
    n_knots = ext_l.shape[0]
    k = np.sum(ext_v <= yy[..., None], axis=-1)
    j = np.clip(k, 1, n_knots - 1)
    v0 = np.take_along_axis(ext_v, (j - 1)[..., None], axis=-1)[..., 0]
    v1 = np.take_along_axis(ext_v, j[..., None], axis=-1)[..., 0]
    gap = v1 - v0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(gap > 0, (yy - v0) / np.where(gap > 0, gap, 1.0), 1.0)
    out = ext_l[j - 1] + np.clip(t, 0.0, 1.0) * (ext_l[j] - ext_l[j - 1])
    out = np.where(k == 0, 0.0, out)
    out = np.where(k >= n_knots, 1.0, out)
    return out


def grid_pdf(qg: QuantileGrid, y) -> np.ndarray:
    """Density of the piecewise-linear CDF (zero outside the extrapolated support)."""
    ext_l, ext_v, yy = _grid_align(qg, y)
    n_knots = ext_l.shape[0]
    k = np.sum(ext_v <= yy[..., None], axis=-1)
    j = np.clip(k, 1, n_knots - 1)
    v0 = np.take_along_axis(ext_v, (j - 1)[..., None], axis=-1)[..., 0]
    v1 = np.take_along_axis(ext_v, j[..., None], axis=-1)[..., 0]
    gap = v1 - v0
    with np.errstate(divide="ignore", invalid="ignore"):
        dens = np.where(gap > 0, (ext_l[j] - ext_l[j - 1]) / np.where(gap > 0, gap, 1.0), 0.0)
    return np.where((k == 0) | (k >= n_knots), 0.0, dens)


def _grid_quantile_closed(qg: QuantileGrid, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    ext_l, ext_v, a = _grid_align(qg, alpha)
    j = np.clip(np.searchsorted(ext_l, a, side="right") - 1, 0, ext_l.shape[0] - 2)
    l0, l1 = ext_l[j], ext_l[j + 1]
    v0 = np.take_along_axis(ext_v, j[..., None], axis=-1)[..., 0]
    v1 = np.take_along_axis(ext_v, (j + 1)[..., None], axis=-1)[..., 0]
    return v0 + (a - l0) / (l1 - l0) * (v1 - v0)


def grid_quantile(qg: QuantileGrid, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    _check_open_unit(alpha)
    return _grid_quantile_closed(qg, alpha)


def cdf(dist, y) -> np.ndarray:
    """Predictive CDF of any supported distribution (mixture, grid, or wrapper with ``.cdf``)."""
    if isinstance(dist, GaussianMixture):
        return mixture_cdf(dist, y)
    if isinstance(dist, QuantileGrid):
        return grid_cdf(dist, y)
    return dist.cdf(y)


pit = cdf


def logpdf(dist, y) -> np.ndarray:
    if isinstance(dist, GaussianMixture):
        return mixture_logpdf(dist, y)
    if isinstance(dist, QuantileGrid):
        with np.errstate(divide="ignore"):
            return np.log(grid_pdf(dist, y))
    return dist.logpdf(y)


def quantile(dist, alpha) -> np.ndarray:
    if isinstance(dist, GaussianMixture):
        return mixture_quantile(dist, alpha)
    if isinstance(dist, QuantileGrid):
        return grid_quantile(dist, alpha)
    return dist.quantile(alpha)


def quantile_closed(dist, t) -> np.ndarray:
    """Quantile function extended to the closed interval ``[0, 1]``.

    Mixtures have unbounded support, so levels 0 and 1 map to -inf and +inf;
    grids map them to the extrapolated endpoints.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("level must lie in [0, 1]")
    if isinstance(dist, QuantileGrid):
        return _grid_quantile_closed(dist, t)
    inner = np.where((t > 0) & (t < 1), t, 0.5)
    q = quantile(dist, inner)
    q = np.where(np.broadcast_to(t, q.shape) <= 0, -np.inf, q)
    return np.where(np.broadcast_to(t, q.shape) >= 1, np.inf, q)


def _crps_a(m: np.ndarray, s2: np.ndarray) -> np.ndarray:
    s = np.sqrt(s2)
    pos = s > 0
    safe = np.where(pos, s, 1.0)
    z = m / safe
    val = m * (2.0 * ndtr(z) - 1.0) + 2.0 * safe * np.exp(-0.5 * z * z - _LOG_SQRT_2PI)
    return np.where(pos, val, np.abs(m))


def crps_mixture(gm: GaussianMixture, y) -> np.ndarray:
    """Closed-form CRPS of a Gaussian mixture (Grimit et al. form)."""
    w, m, s, yy = _mixture_terms(gm, y)
    first = np.sum(w * _crps_a(yy - m, s * s), axis=-1)
    ww = w[..., :, None] * w[..., None, :]
    dm = m[..., :, None] - m[..., None, :]
    ss = s[..., :, None] ** 2 + s[..., None, :] ** 2
    second = np.sum(ww * _crps_a(dm, ss), axis=(-2, -1))
    return np.maximum(first - 0.5 * second, 0.0)


def quantile_score(alpha, q, y) -> np.ndarray:
    """Quantile (pinball) score scaled by 2: ``2 (1{y <= q} - alpha) (q - y)``."""
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return 2.0 * ((y <= q).astype(np.float64) - alpha) * (q - y)


def crps_grid(qg: QuantileGrid, y) -> np.ndarray:
    """CRPS estimate as the mean quantile score over the grid levels."""
    y = np.asarray(y, dtype=np.float64)
    v, yy = _align(qg.values, len(qg.batch_shape), y)
    return np.mean(quantile_score(qg.levels, v, yy), axis=-1)


def nll(gm: GaussianMixture, y) -> np.ndarray:
    """Negative log-likelihood, evaluated in log space; +inf if the density underflows."""
    return -mixture_logpdf(gm, y)


def sharpness_std(dist) -> np.ndarray:
    """Standard deviation of each predictive distribution in the batch."""
    if isinstance(dist, GaussianMixture):
        w, m, s = dist.weights, dist.means, dist.stds
        mean = np.sum(w * m, axis=-1)
        second = np.sum(w * (s * s + m * m), axis=-1)
        return np.sqrt(np.maximum(second - mean * mean, 0.0))
    if isinstance(dist, QuantileGrid):
        # the piecewise-linear CDF is a mixture of uniforms on consecutive knots
        ext_l, ext_v = dist.extended()
        mass = np.diff(ext_l)
        a, b = ext_v[..., :-1], ext_v[..., 1:]
        mean = np.sum(mass * 0.5 * (a + b), axis=-1)
        second = np.sum(mass * (a * a + a * b + b * b) / 3.0, axis=-1)
        return np.sqrt(np.maximum(second - mean * mean, 0.0))
    return dist.std()
