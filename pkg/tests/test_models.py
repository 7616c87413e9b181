import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import gaussian_conditioning
from smcvar.models import (
    LinearGaussianModel,
    StochasticVolatility,
    kalman_filter,
    load_observations,
    save_observations,
    sv_simulate,
)
from smcvar.rng import RngStream


class TestStochasticVolatility:
    def test_parameter_checks(self):
        with pytest.raises(ValueError, match="phi"):
            StochasticVolatility([0.1], phi=1.0)
        with pytest.raises(ValueError, match="phi"):
            sv_simulate(5, RngStream(0), phi=-1.2)
        with pytest.raises(ValueError, match="positive"):
            StochasticVolatility([0.1], sigma=0.0)
        with pytest.raises(ValueError):
            sv_simulate(0, RngStream(0))

    def test_zero_state_noise_is_constant(self):
        x, _ = sv_simulate(50, RngStream(1), sigma=0.0)
        np.testing.assert_array_equal(x, 0.0)

    def test_white_noise_when_phi_zero(self):
        x, _ = sv_simulate(40_000, RngStream(2), phi=0.0, sigma=1.0)
        assert abs(np.corrcoef(x[1:], x[:-1])[0, 1]) < 4 / math.sqrt(40_000)

    def test_stationary_variance(self):
        model = StochasticVolatility([0.0], phi=0.8, sigma=0.6)
        xs = np.array([sv_simulate(1, RngStream(3, i), phi=0.8, sigma=0.6)[0][0] for i in range(20_000)])
        assert model.stationary_var == pytest.approx(0.36 / 0.36)
        assert abs(xs.var() / model.stationary_var - 1) < 0.05
        draws = model.init_sample(RngStream(4), 20_000)
        assert abs(draws.var() / model.stationary_var - 1) < 0.05

    @given(st.floats(0.01, 5.0), st.floats(-30, 30))
    def test_potential_bounded(self, y, x):
        model = StochasticVolatility([y])
        assert model.potential(np.array([x]), 0)[0] <= model.potential_bounds[0] * (1 + 1e-12)

    def test_bound_attained_at_mode(self):
        y = 0.7
        model = StochasticVolatility([y])
        x_mode = math.log(y * y / model.beta**2)
        assert model.potential(np.array([x_mode]), 0)[0] == pytest.approx(model.potential_bounds[0])

    def test_log_density_matrix_matches_pointwise(self):
        model = StochasticVolatility([0.1, 0.2])
        gen = np.random.default_rng(5)
        a, b = gen.normal(size=4), gen.normal(size=3)
        m = model.trans_logdensity_matrix(a, b, 1)
        expect = np.log(model.trans_density(a[None, :], b[:, None], 1))
        np.testing.assert_allclose(m, expect, rtol=1e-12)


class TestLinearGaussian:
    def test_kalman_against_dense_conditioning(self):
        a, c, sx, sy, m0, v0 = 0.8, 1.3, 0.7, 0.5, 0.2, 1.5
        y = np.random.default_rng(6).normal(size=12)
        res = kalman_filter(LinearGaussianModel(y, a, c, sx, sy, m0, v0))
        means, variances = gaussian_conditioning(a, c, sx, sy, m0, v0, y)
        np.testing.assert_allclose(res.filt_means, means, atol=1e-10)
        np.testing.assert_allclose(res.filt_vars, variances, atol=1e-10)

    def test_log_likelihood_against_joint_density(self):
        a, c, sx, sy, m0, v0 = 0.5, 1.0, 1.0, 0.8, 0.0, 2.0
        y = np.random.default_rng(7).normal(size=6)
        T = len(y)
        L = np.array([[a ** (t - s) * (math.sqrt(v0) if s == 0 else sx) if s <= t else 0.0 for s in range(T)] for t in range(T)])
        cov = c * c * L @ L.T + sy * sy * np.eye(T)
        _, logdet = np.linalg.slogdet(cov)
        ref = -0.5 * (T * math.log(2 * math.pi) + logdet + y @ np.linalg.solve(cov, y))
        assert kalman_filter(LinearGaussianModel(y, a, c, sx, sy, m0, v0)).log_likelihood == pytest.approx(ref)

    def test_noiseless_state(self):
        model = LinearGaussianModel(np.ones(5), a=0.5, sigma_x=0.0, m0=2.0, v0=0.0)
        res = kalman_filter(model)
        np.testing.assert_allclose(res.filt_means, 2.0 * 0.5 ** np.arange(5))
        np.testing.assert_array_equal(res.filt_vars, 0.0)

    def test_parameter_checks(self):
        with pytest.raises(ValueError):
            LinearGaussianModel([0.0], sigma_y=0.0)


class TestObservationFiles:
    def test_plain_roundtrip(self, tmp_path):
        y = np.random.default_rng(8).normal(size=7)
        p = tmp_path / "y.txt"
        save_observations(p, y)
        np.testing.assert_array_equal(load_observations(p), y)

    def test_csv_column(self, tmp_path):
        p = tmp_path / "y.csv"
        p.write_text("# recorded series\nt,y\n0,1.5\n1,-2.25\n")
        np.testing.assert_array_equal(load_observations(p), [1.5, -2.25])

    def test_missing_column(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("t,z\n0,1\n")
        with pytest.raises(ValueError, match="column 'y'"):
            load_observations(p)

    def test_empty(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("# nothing\n")
        assert load_observations(p).size == 0
