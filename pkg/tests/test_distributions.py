import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from calibreg.distributions import (
    GaussianMixture,
    QuantileGrid,
    cdf,
    crps_grid,
    crps_mixture,
    grid_cdf,
    grid_quantile,
    mixture_cdf,
    mixture_quantile,
    nll,
    pit,
    quantile,
    quantile_score,
    sharpness_std,
)

N01 = GaussianMixture.normal(0.0, 1.0)
GRID = QuantileGrid([0.25, 0.5, 0.75], [1.0, 2.0, 3.0])


def random_mixture(rng, k=None, batch=()):
    k = k or rng.integers(1, 5)
    w = rng.dirichlet(np.ones(k), size=batch)
    mu = rng.normal(scale=2.0, size=batch + (k,))
    sd = np.exp(rng.normal(scale=0.5, size=batch + (k,)))
    return GaussianMixture(w, mu, sd)


def crps_by_integration(gm, y):
    f = lambda t: (float(mixture_cdf(gm, t)) - (t >= y)) ** 2  # noqa: E731
    lo = min(gm.means.min() - 12 * gm.stds.max(), y - 1)
    hi = max(gm.means.max() + 12 * gm.stds.max(), y + 1)
    left, _ = integrate.quad(f, lo, y, epsabs=1e-12, limit=400)
    right, _ = integrate.quad(f, y, hi, epsabs=1e-12, limit=400)
    return left + right


class TestConstruction:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            GaussianMixture([0.5, 0.4], [0, 1], [1, 1])

    def test_stds_positive(self):
        with pytest.raises(ValueError):
            GaussianMixture([1.0], [0.0], [0.0])

    def test_grid_levels_strictly_increasing(self):
        with pytest.raises(ValueError):
            QuantileGrid([0.5, 0.5], [1.0, 2.0])

    def test_grid_values_sorted_on_construction(self):
        g = QuantileGrid([0.25, 0.5, 0.75], [3.0, 1.0, 2.0])
        assert g.values.tolist() == [1.0, 2.0, 3.0]

    def test_immutable(self):
        with pytest.raises(ValueError):
            N01.means[0] = 3.0


class TestMixtureCdfQuantile:
    def test_symmetry(self):
        assert float(cdf(N01, 0.0)) == pytest.approx(0.5, abs=1e-15)
        sym = GaussianMixture([0.5, 0.5], [-1.0, 1.0], [1.0, 1.0])
        assert float(cdf(sym, 0.0)) == pytest.approx(0.5, abs=1e-15)

    def test_normal_cdf_oracle(self):
        assert float(cdf(N01, 1.959964)) == pytest.approx(stats.norm.cdf(1.959964), abs=1e-12)
        assert float(cdf(N01, 1.959964)) == pytest.approx(0.975, abs=1e-6)

    def test_normal_quantile_oracle(self):
        assert float(quantile(N01, 0.975)) == pytest.approx(1.959964, abs=1e-5)
        assert float(quantile(N01, 0.5)) == pytest.approx(0.0, abs=1e-10)

    def test_quantile_domain(self):
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                mixture_quantile(N01, bad)

    def test_cdf_monotone_for_random_mixtures(self):
        rng = np.random.default_rng(0)
        ys = np.sort(rng.normal(scale=5, size=200))
        for _ in range(1000 // 20):
            gm = random_mixture(rng, batch=(20,))
            f = cdf(gm, np.broadcast_to(ys, (20, 200)))
            assert np.all(np.diff(f, axis=1) >= 0)
            assert np.all((f >= 0) & (f <= 1))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), alpha=st.floats(0.001, 0.999))
    def test_quantile_inverts_cdf(self, seed, alpha):
        gm = random_mixture(np.random.default_rng(seed))
        q = mixture_quantile(gm, alpha)
        assert abs(float(mixture_cdf(gm, q)) - alpha) <= 1e-10

    def test_batched_matches_scalar(self):
        rng = np.random.default_rng(1)
        gm = random_mixture(rng, k=3, batch=(5,))
        levels = np.array([0.1, 0.5, 0.9])
        q = quantile(gm, levels[None, :])
        for i in range(5):
            for j, a in enumerate(levels):
                assert q[i, j] == pytest.approx(float(quantile(gm[i], a)), abs=1e-9)


class TestGrid:
    @pytest.mark.parametrize("y, expected", [(2.0, 0.5), (1.5, 0.375), (2.5, 0.625), (3.0, 0.75)])
    def test_cdf_hand_values(self, y, expected):
        assert float(grid_cdf(GRID, y)) == pytest.approx(expected, abs=1e-15)

    def test_pit_alias(self):
        assert float(pit(GRID, 3.0)) == pytest.approx(0.75)

    @pytest.mark.parametrize("a, expected", [(0.5, 2.0), (0.375, 1.5)])
    def test_quantile_hand_values(self, a, expected):
        assert float(grid_quantile(GRID, a)) == pytest.approx(expected, abs=1e-15)

    def test_extrapolation_support(self):
        # slope 4 per unit level: support [0, 4]
        assert float(grid_cdf(GRID, 0.5)) == pytest.approx(0.125)
        assert float(grid_cdf(GRID, -0.1)) == 0.0
        assert float(grid_cdf(GRID, 4.0)) == 1.0

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), u=st.floats(0.0, 1.0))
    @example(seed=782, u=0.6875)
    def test_round_trip_interior(self, seed, u):
        rng = np.random.default_rng(seed)
        levels = np.sort(rng.choice(np.arange(1, 100) / 100, size=6, replace=False))
        g = QuantileGrid(levels, np.cumsum(rng.exponential(size=6)))
        a = levels[0] + u * (levels[-1] - levels[0])
        y = float(grid_quantile(g, a))
        # rounding y costs up to (steepest CDF slope) x (a few ulps of y) in level space
        slope = float(np.max(np.diff(levels) / np.diff(g.values)))
        assert float(grid_cdf(g, y)) == pytest.approx(a, abs=1e-12 + 4 * slope * np.spacing(abs(y)))
        assert float(grid_quantile(g, grid_cdf(g, y))) == pytest.approx(y, abs=1e-8)

    def test_quantile_domain(self):
        with pytest.raises(ValueError):
            grid_quantile(GRID, 1.0)


class TestScores:
    def test_crps_normal_values(self):
        assert float(crps_mixture(N01, 0.0)) == pytest.approx(0.233695, abs=1e-5)
        assert float(crps_mixture(N01, 2.0)) == pytest.approx(1.452790, abs=1e-5)

    def test_crps_against_integration(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            gm = random_mixture(rng)
            y = rng.normal(scale=3)
            assert float(crps_mixture(gm, y)) == pytest.approx(crps_by_integration(gm, y), abs=1e-6)

    def test_crps_point_mass_limit(self):
        gm = GaussianMixture.normal(1.5, 1e-8)
        assert float(crps_mixture(gm, -0.5)) == pytest.approx(2.0, abs=1e-6)

    def test_quantile_score_hand_values(self):
        assert float(quantile_score(0.5, 0.0, 1.0)) == pytest.approx(1.0)
        assert float(quantile_score(0.9, 0.0, 1.0)) == pytest.approx(1.8)

    def test_crps_grid(self):
        assert float(crps_grid(QuantileGrid([0.9], [0.0]), 1.0)) == pytest.approx(1.8)
        assert float(crps_grid(GRID, 2.0)) > 0
        flat = QuantileGrid([0.25, 0.5, 0.75], [2.0, 2.0, 2.0])
        assert float(crps_grid(flat, 2.0)) == 0.0

    def test_crps_grid_approaches_mixture(self):
        m = 1024
        levels = (np.arange(1, m + 1) - 0.5) / m
        gm = GaussianMixture([0.3, 0.7], [-1.0, 1.5], [0.5, 1.0])
        g = QuantileGrid(levels, quantile(gm, levels))
        for y in (-2.0, 0.0, 1.0, 3.0):
            assert float(crps_grid(g, y)) == pytest.approx(float(crps_mixture(gm, y)), rel=0.02)

    def test_nll_values(self):
        assert float(nll(N01, 0.0)) == pytest.approx(0.918939, abs=1e-6)
        twin = GaussianMixture([0.5, 0.5], [0.0, 0.0], [1.0, 1.0])
        assert float(nll(twin, 0.0)) == pytest.approx(0.918939, abs=1e-6)
        wide = GaussianMixture.normal(0.0, 2.0)
        assert float(nll(wide, 0.0)) == pytest.approx(0.9189385 + np.log(2), abs=1e-6)

    def test_nll_far_tail_stays_exact(self):
        # log-space evaluation: the density underflows but its log does not
        sd, y = 1e-3, 10.0
        expected = 0.5 * (y / sd) ** 2 + np.log(sd) + 0.5 * np.log(2 * np.pi)
        assert float(nll(GaussianMixture.normal(0.0, sd), y)) == pytest.approx(expected, rel=1e-12)


class TestSharpness:
    def test_single_component(self):
        assert float(sharpness_std(GaussianMixture.normal(3.0, 2.0))) == pytest.approx(2.0)

    def test_two_point_masses(self):
        gm = GaussianMixture([0.5, 0.5], [-1.0, 1.0], [1e-8, 1e-8])
        assert float(sharpness_std(gm)) == pytest.approx(1.0, abs=1e-4)

    def test_grid_of_normal_quantiles(self):
        levels = (np.arange(1, 65) - 0.5) / 64
        g = QuantileGrid(levels, stats.norm.ppf(levels))
        assert float(sharpness_std(g)) == pytest.approx(1.0, abs=0.05)

    def test_grid_matches_quadrature(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            levels = np.sort(rng.choice(np.arange(1, 50) / 50, size=7, replace=False))
            g = QuantileGrid(levels, np.cumsum(rng.exponential(size=7)))
            u = (np.arange(10_000) + 0.5) / 10_000
            q = grid_quantile(g, u)
            assert float(sharpness_std(g)) == pytest.approx(q.std(), rel=1e-3)
