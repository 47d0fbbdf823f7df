"""Differentiable scoring rules and calibration regularizers (torch, float64).

Mixture parameters are passed as ``(weights, means, stds)`` tensors of shape
``(N, K)``; quantile predictions as ``values`` of shape ``(N, M)`` together
with a level vector of shape ``(M,)``.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SPACING_FLOOR = 1e-12


def _norm_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / _SQRT2)


def _norm_pdf(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(-0.5 * x * x - _LOG_SQRT_2PI)


def _expand(params, y: torch.Tensor):
    """Broadcast mixture params against ``y`` of shape ``(N,)`` or ``(N, L)``."""
    w, mu, s = params
    if y.dim() == 1:
        return w, mu, s, y[:, None]
    return w[:, None, :], mu[:, None, :], s[:, None, :], y[..., None]


def mixture_cdf(params, y: torch.Tensor) -> torch.Tensor:
    w, mu, s, yy = _expand(params, y)
    return (w * _norm_cdf((yy - mu) / s)).sum(-1)


def mixture_logpdf(params, y: torch.Tensor) -> torch.Tensor:
    w, mu, s, yy = _expand(params, y)
    z = (yy - mu) / s
    return torch.logsumexp(torch.log(w) - 0.5 * z * z - torch.log(s) - _LOG_SQRT_2PI, dim=-1)


def _crps_a(m: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    r = m / s
    return m * (2.0 * _norm_cdf(r) - 1.0) + 2.0 * s * _norm_pdf(r)


def mixture_crps(params, y: torch.Tensor) -> torch.Tensor:
    """Per-point closed-form CRPS of a Gaussian mixture."""
    w, mu, s = params
    first = (w * _crps_a(y[:, None] - mu, s)).sum(-1)
    pair_s = torch.sqrt(s[:, :, None] ** 2 + s[:, None, :] ** 2)
    pair = _crps_a(mu[:, :, None] - mu[:, None, :], pair_s)
    second = 0.5 * (w[:, :, None] * w[:, None, :] * pair).sum((-1, -2))
    return first - second


def quantile_score(levels: torch.Tensor, q: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``2 (1{y <= q} - alpha) (q - y)``; ``y`` broadcasts against ``q``."""
    return 2.0 * ((y <= q).to(q.dtype) - levels) * (q - y)


def pinball_grid_loss(levels: torch.Tensor, values: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-point mean quantile score over the grid levels."""
    return quantile_score(levels, values, y[:, None]).mean(-1)


def nll_loss(params, y: torch.Tensor) -> torch.Tensor:
    return -mixture_logpdf(params, y).mean()


def crps_loss(params, y: torch.Tensor) -> torch.Tensor:
    return mixture_crps(params, y).mean()


def mixture_quantile(params, levels: torch.Tensor, iters: int = 100) -> torch.Tensor:
    """Quantiles ``(N, L)`` at ``levels`` with gradients from the implicit function theorem.

    The root is found by bisection without tracking gradients; a single
    Newton-type correction with a detached density then carries
    ``dQ/dtheta = -(dF/dtheta) / f`` back to the parameters.
    """
    w, mu, s = params
    n = mu.shape[0]
    a = levels.to(mu.dtype).expand(n, -1)
    with torch.no_grad():
        spread = 10.0 * s.max(-1).values
        lo = (mu.min(-1).values - spread)[:, None].expand_as(a).clone()
        hi = (mu.max(-1).values + spread)[:, None].expand_as(a).clone()
        det = (w.detach(), mu.detach(), s.detach())
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            right = mixture_cdf(det, mid) < a
            lo = torch.where(right, mid, lo)
            hi = torch.where(right, hi, mid)
        q0 = 0.5 * (lo + hi)
        dens = torch.exp(mixture_logpdf(det, q0))
    return q0 - (mixture_cdf(params, q0) - a) / dens


def grid_cdf(levels: torch.Tensor, values: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Piecewise-linear CDF of quantile predictions with linear end extrapolation."""
    m = levels.shape[0]
    slope = (values[:, -1] - values[:, 0]) / (levels[-1] - levels[0])
    lo = values[:, :1] - slope[:, None] * levels[0]
    hi = values[:, -1:] + slope[:, None] * (1.0 - levels[-1])
    ext_v = torch.cat([lo, values, hi], dim=1)
    zero = levels.new_zeros(1)
    ext_l = torch.cat([zero, levels, zero + 1.0])
    with torch.no_grad():
        j = (ext_v <= y[:, None]).sum(1) - 1
        j = j.clamp(0, m)
    v0 = ext_v.gather(1, j[:, None])[:, 0]
    v1 = ext_v.gather(1, (j + 1)[:, None])[:, 0]
    width = v1 - v0
    safe = torch.where(width > 0, width, torch.ones_like(width))
    t = torch.where(width > 0, (y - v0) / safe, torch.ones_like(width))
    out = ext_l[j] + t * (ext_l[j + 1] - ext_l[j])
    below = y < ext_v[:, 0]
    above = y >= ext_v[:, -1]
    out = torch.where(below, torch.zeros_like(out), out)
    out = torch.where(above, torch.ones_like(out), out)
    return out.clamp(0.0, 1.0)


def soft_rank(z: torch.Tensor, tau: float) -> torch.Tensor:
    """``1 + sum_{j != i} sigmoid(tau (z_i - z_j))``."""
    # the j = i term contributes sigmoid(0) = 1/2
    return 0.5 + torch.sigmoid(tau * (z[:, None] - z[None, :])).sum(1)


def soft_sort(z: torch.Tensor, tau: float) -> torch.Tensor:
    """Soft order statistics: Gaussian-kernel average of ``z`` around each target rank.

    The kernel in rank space has width ``N / tau``, i.e. ``1 / tau`` on the
    PIT scale, and collapses onto the hard order statistics as ``tau`` grows.
    """
    n = z.shape[0]
    r = soft_rank(z, tau)
    k = torch.arange(1, n + 1, dtype=z.dtype, device=z.device)
    logits = -0.5 * (tau * (k[:, None] - r[None, :]) / n) ** 2
    return torch.softmax(logits, dim=1) @ z


def _sorted(z: torch.Tensor, tau: float, hard: bool) -> torch.Tensor:
    return torch.sort(z).values if hard else soft_sort(z, tau)


def reg_qr(pits: torch.Tensor, k: int | None = None, tau_sort: float = 100.0, hard: bool = False) -> torch.Tensor:
    """Sample-spacing (Vasicek) estimate of the PIT entropy.

    This is an entropy, maximal for uniform PITs; training penalizes its
    negative.
    """
    n = pits.shape[0]
    if k is None:
        k = min(math.ceil(math.sqrt(n)), n - 1)
    if not 1 <= k <= n - 1:
        raise ValueError(f"spacing k={k} needs 1 <= k <= N - 1 with N={n}")
    zs = _sorted(pits, tau_sort, hard)
    spacing = (zs[k:] - zs[:-k]).clamp_min(_SPACING_FLOOR)
    return torch.log((n + 1) / k * spacing).mean()


def reg_trunc(quantiles: torch.Tensor, targets: torch.Tensor, levels: torch.Tensor) -> torch.Tensor:
    """Truncation hinge averaged over levels; the direction of each level is a fixed gate."""
    y = targets[:, None]
    with torch.no_grad():
        coverage = (y <= quantiles).to(quantiles.dtype).mean(0)
        push_up = coverage < levels
    up = torch.relu(y - quantiles).mean(0)
    down = torch.relu(quantiles - y).mean(0)
    return torch.where(push_up, up, down).mean()


def reg_pce_kde(pits: torch.Tensor, levels: torch.Tensor, tau: float = 100.0, p: float = 1.0) -> torch.Tensor:
    """``mean_j |alpha_j - mean_i sigmoid(tau (alpha_j - Z_i))|^p``."""
    phi = torch.sigmoid(tau * (levels[:, None] - pits[None, :])).mean(1)
    return (levels - phi).abs().pow(p).mean()


def reg_pce_sort(pits: torch.Tensor, p: float = 1.0, tau_sort: float = 100.0, hard: bool = False) -> torch.Tensor:
    n = pits.shape[0]
    target = torch.arange(1, n + 1, dtype=pits.dtype, device=pits.device) / (n + 1)
    return (_sorted(pits, tau_sort, hard) - target).abs().pow(p).mean()


def softplus_std(raw: torch.Tensor, floor: float) -> torch.Tensor:
    return F.softplus(raw) + floor
