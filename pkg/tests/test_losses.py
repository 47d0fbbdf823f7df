"""Scoring rules and regularizers: hand values, limits and gradient checks."""

import math

import numpy as np
import pytest
import torch

from calibreg import losses
from calibreg.distributions import GaussianMixture, QuantileGrid, crps_mixture, grid_cdf, mixture_quantile, nll
from calibreg.metrics import pce

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


def mixture_params(rng, n, k):
    w = torch.softmax(t(rng.normal(size=(n, k))), 1)
    return w, t(rng.normal(size=(n, k))), t(np.exp(rng.normal(scale=0.4, size=(n, k))))


def central_difference_check(fn, x: torch.Tensor, probes: int, rng, h: float = 1e-4):
    """Max relative error between autograd and central differences at random coordinates.

    The differences are Richardson-extrapolated from steps ``h`` and ``h / 2``
    so that the sharp tau = 100 relaxations do not dominate the comparison
    with O(h^2) truncation error.
    """
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach().clone()
    worst = 0.0
    flat = x.detach().view(-1)
    for idx in rng.choice(flat.numel(), size=min(probes, flat.numel()), replace=False):
        num = (4 * _central(fn, x, flat, idx, h / 2) - _central(fn, x, flat, idx, h)) / 3
        ana = grad.view(-1)[idx].item()
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-7))
    return worst


def _central(fn, x, flat, idx, h):
    plus, minus = flat.clone(), flat.clone()
    plus[idx] += h
    minus[idx] -= h
    with torch.no_grad():
        return (fn(plus.view_as(x)) - fn(minus.view_as(x))).item() / (2 * h)


class TestScoringRules:
    def test_nll_and_crps_values(self):
        p = (t([[1.0]]), t([[0.0]]), t([[1.0]]))
        assert losses.nll_loss(p, t([0.0])).item() == pytest.approx(0.918939, abs=1e-6)
        assert losses.crps_loss(p, t([0.0])).item() == pytest.approx(0.233695, abs=1e-6)

    def test_match_numpy_implementations(self):
        rng = np.random.default_rng(0)
        p = mixture_params(rng, 40, 3)
        y = t(rng.normal(size=40))
        gm = GaussianMixture(*(v.numpy() for v in p))
        assert np.allclose(losses.mixture_crps(p, y).numpy(), crps_mixture(gm, y.numpy()), atol=1e-12)
        assert np.allclose(-losses.mixture_logpdf(p, y).numpy(), nll(gm, y.numpy()), atol=1e-12)

    def test_nll_stationary_at_mean(self):
        mu = t([[0.7]]).requires_grad_(True)
        losses.nll_loss((t([[1.0]]), mu, t([[1.3]])), t([0.7])).backward()
        assert mu.grad.item() == pytest.approx(0.0, abs=1e-15)

    def test_pinball(self):
        levels = t([0.5, 0.9])
        q = t([[0.0, 0.0]])
        assert losses.pinball_grid_loss(levels, q, t([1.0])).item() == pytest.approx((1.0 + 1.8) / 2)

    def test_mixture_quantile_matches_bisection(self):
        rng = np.random.default_rng(1)
        p = mixture_params(rng, 10, 2)
        levels = t([0.05, 0.5, 0.93])
        q = losses.mixture_quantile(p, levels).detach().numpy()
        gm = GaussianMixture(*(v.numpy() for v in p))
        assert np.allclose(q, mixture_quantile(gm, levels.numpy()[None, :]), atol=1e-9)

    def test_grid_cdf_matches_numpy(self):
        rng = np.random.default_rng(2)
        levels = np.array([0.1, 0.3, 0.5, 0.9])
        vals = np.sort(rng.normal(size=(30, 4)), axis=1)
        y = rng.normal(scale=2, size=30)
        ours = losses.grid_cdf(t(levels), t(vals), t(y)).numpy()
        assert np.allclose(ours, grid_cdf(QuantileGrid(levels, vals), y), atol=1e-12)


class TestRegularizerValues:
    def test_qr_equispaced_zero(self):
        n = 9
        z = t(np.arange(1, n + 1) / (n + 1))
        assert losses.reg_qr(z, 1, hard=True).item() == pytest.approx(0.0, abs=1e-12)

    def test_qr_hand_value(self):
        assert losses.reg_qr(t([0.2, 0.6]), 1, hard=True).item() == pytest.approx(math.log(1.2), abs=1e-12)

    def test_qr_bad_k(self):
        with pytest.raises(ValueError):
            losses.reg_qr(t([0.2, 0.6]), 2)

    def test_qr_permutation_invariant(self):
        z = t([0.1, 0.7, 0.3, 0.95, 0.5])
        assert losses.reg_qr(z, 2, hard=True).item() == losses.reg_qr(z.flip(0), 2, hard=True).item()

    def test_qr_entropy_maximal_at_equispaced(self):
        rng = np.random.default_rng(3)
        n = 20
        base = np.arange(1, n + 1) / (n + 1)
        top = losses.reg_qr(t(base), 1, hard=True).item()
        for _ in range(100):
            z = np.clip(base + rng.normal(scale=0.02, size=n), 0, 1)
            assert losses.reg_qr(t(z), 1, hard=True).item() <= top + 1e-12

    def test_trunc_hand_values(self):
        y = t([1.0, 2.0])
        levels = t([0.5])
        assert losses.reg_trunc(t([[0.0], [0.0]]), y, levels).item() == pytest.approx(1.5)
        assert losses.reg_trunc(t([[3.0], [3.0]]), y, levels).item() == pytest.approx(1.5)
        assert losses.reg_trunc(t([[1.0], [2.0]]), y, levels).item() == 0.0

    def test_pce_kde_values(self):
        assert losses.reg_pce_kde(t([0.5]), t([0.5]), 7.0).item() == pytest.approx(0.0, abs=1e-15)
        assert losses.reg_pce_kde(t([0.0] * 5), t([0.5]), 1e8).item() == pytest.approx(0.5)

    def test_pce_kde_hard_limit(self):
        rng = np.random.default_rng(4)
        m = 100
        levels = np.arange(1, m + 1) / (m + 1)
        for _ in range(10):
            z = rng.uniform(size=50)
            # keep the PITs away from the levels, where the hard indicator jumps
            z = z[np.min(np.abs(z[:, None] - levels[None, :]), axis=1) > 1e-4]
            assert losses.reg_pce_kde(t(z), t(levels), 1e6).item() == pytest.approx(pce(z, m), abs=1e-3)

    def test_pce_sort_values(self):
        n = 7
        assert losses.reg_pce_sort(t(np.arange(1, n + 1) / (n + 1)), hard=True).item() == pytest.approx(0.0, abs=1e-15)
        assert losses.reg_pce_sort(t([0.9]), hard=True).item() == pytest.approx(0.4)
        z = t([0.3, 0.9, 0.1])
        assert losses.reg_pce_sort(z, hard=True).item() == losses.reg_pce_sort(z[[2, 0, 1]], hard=True).item()

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            z = t(rng.uniform(size=30))
            assert losses.reg_pce_sort(z).item() >= 0
            assert losses.reg_pce_kde(z, t([0.2, 0.5, 0.8])).item() >= 0
            assert losses.reg_trunc(t(rng.normal(size=(30, 3))), t(rng.normal(size=30)), t([0.2, 0.5, 0.8])).item() >= 0


class TestSoftSort:
    def test_soft_rank_limit(self):
        z = t([0.3, 0.1, 0.8, 0.5])
        assert torch.allclose(losses.soft_rank(z, 1e6), t([2.0, 1.0, 4.0, 3.0]))

    def test_soft_sort_limit(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            z = t(rng.uniform(size=100))
            assert torch.allclose(losses.soft_sort(z, 1e7), torch.sort(z).values, atol=1e-9)

    def test_soft_sort_close_at_default(self):
        z = t(np.random.default_rng(7).uniform(size=256))
        assert (losses.soft_sort(z, 100.0) - torch.sort(z).values).abs().max().item() < 0.05


class TestGradients:
    """Autograd against extrapolated central differences (float64) on random points."""

    PROBES = 20

    @pytest.mark.parametrize("kind", ["nll", "crps"])
    def test_mixture_losses(self, kind):
        rng = np.random.default_rng(10)
        n, k = 16, 3
        y = t(rng.normal(size=n))

        def fn(theta):
            raw = theta.view(n, 3 * k)
            p = (torch.softmax(raw[:, :k], 1), raw[:, k:2 * k], torch.nn.functional.softplus(raw[:, 2 * k:]) + 0.1)
            return losses.nll_loss(p, y) if kind == "nll" else losses.crps_loss(p, y)

        assert central_difference_check(fn, t(rng.normal(size=(n * 3 * k,))), self.PROBES, rng) <= 1e-4

    def test_pinball(self):
        rng = np.random.default_rng(11)
        levels = t((np.arange(1, 9) - 0.5) / 8)
        y = t(rng.normal(size=12))
        fn = lambda q: losses.pinball_grid_loss(levels, torch.sort(q.view(12, 8), 1).values, y).mean()  # noqa: E731
        assert central_difference_check(fn, t(rng.normal(size=96)), self.PROBES, rng) <= 1e-4

    @pytest.mark.parametrize("reg", ["qr", "pce-kde", "pce-sort"])
    def test_pit_regularizers(self, reg):
        rng = np.random.default_rng(12)
        n = 40

        def fn(logits):
            z = torch.sigmoid(logits)
            if reg == "qr":
                return losses.reg_qr(z, 3, 100.0)
            if reg == "pce-kde":
                return losses.reg_pce_kde(z, t(np.arange(1, 21) / 21), 100.0, 1.0)
            return losses.reg_pce_sort(z, 1.0, 100.0)

        assert central_difference_check(fn, t(rng.normal(size=n)), self.PROBES, rng) <= 1e-4

    def test_trunc_through_mixture_quantiles(self):
        rng = np.random.default_rng(13)
        n, k = 24, 2
        y = t(rng.normal(size=n))
        levels = t(np.arange(1, 8) / 8)

        def fn(theta):
            raw = theta.view(n, 3 * k)
            p = (torch.softmax(raw[:, :k], 1), raw[:, k:2 * k], torch.nn.functional.softplus(raw[:, 2 * k:]) + 0.2)
            return losses.reg_trunc(losses.mixture_quantile(p, levels), y, levels)

        assert central_difference_check(fn, t(rng.normal(size=n * 3 * k)), self.PROBES, rng) <= 1e-4

    def test_grid_pits(self):
        rng = np.random.default_rng(14)
        levels = t((np.arange(1, 7) - 0.5) / 6)
        y = t(rng.normal(size=10))
        fn = lambda v: losses.reg_pce_kde(  # noqa: E731
            losses.grid_cdf(levels, torch.sort(v.view(10, 6), 1).values, y), t([0.25, 0.5, 0.75]), 50.0
        )
        assert central_difference_check(fn, t(rng.normal(scale=2, size=60)), self.PROBES, rng) <= 1e-4
