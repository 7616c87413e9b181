import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import ffbs_enumeration, s12_update_scalar
from smcvar.backward import backward_matrix, bs_es_filter_variance, bs_init, bs_update
from smcvar.core import filter_estimate, init_filter, filter_step
from smcvar.models import StochasticVolatility, sv_simulate
from smcvar.oracle import DiscreteHmm
from smcvar.rng import RngStream
from smcvar.smoothing import (
    ffbs_additive_update,
    ffbs_forward_update,
    smoothing_init,
    smoothing_update,
    smoothing_var_update,
    smoothing_variance,
)


def sv_model(T=12, seed=0):
    _, y = sv_simulate(T + 1, RngStream(seed))
    return StochasticVolatility(y)


def run(model, n, T, ell, h, seed):
    """Yield ``(state, beta, bs, sm)`` at every time step."""
    rng = RngStream(seed)
    s = init_filter(model, n, rng)
    bs = bs_init(n)
    sm = smoothing_update(smoothing_init(ell), None, h, s, bs)
    yield s, None, bs, sm
    for _ in range(T):
        prev, s = s, filter_step(s, model, rng)
        beta = backward_matrix(prev, s.particles, model)
        bs = bs_update(bs, beta, prev.norm_weights)
        sm = smoothing_update(sm, beta, h, s, bs)
        yield s, beta, bs, sm


def ident(x):
    return np.asarray(x, float)


def test_negative_ell_rejected():
    with pytest.raises(ValueError):
        smoothing_init(-1)


def test_nothing_tracked_before_ell():
    for s, _, _, sm in run(sv_model(), 5, 3, 3, ident, 1):
        if s.t < 3:
            assert sm.Tstat is None and sm.S1 is None and sm.smoothed is None
        else:
            assert sm.Tstat is not None


def test_constant_function():
    for s, _, bs, sm in run(sv_model(), 6, 6, 2, 4.0, 2):
        if s.t >= 2:
            assert sm.smoothed == pytest.approx(4.0)
            assert smoothing_variance(sm, s, bs) == pytest.approx(0.0, abs=1e-10)


def test_estimate_at_ell_is_filter_mean():
    for s, _, _, sm in run(sv_model(), 8, 4, 4, ident, 3):
        if s.t == 4:
            assert sm.smoothed == pytest.approx(filter_estimate(s, ident))


def test_matches_index_path_enumeration():
    hmm = DiscreteHmm.random(np.random.default_rng(4), n_states=3, horizon=4)
    h = np.array([0.5, -1.0, 2.0])
    hist = list(run(hmm, 4, 4, 2, lambda x: h[x], 4))
    betas = [b for s, b, _, _ in hist if s.t > 2]
    s_last, _, _, sm = hist[-1]
    h_ell = h[hist[2][0].particles]
    assert sm.smoothed == pytest.approx(ffbs_enumeration(betas, s_last.norm_weights, h_ell, 2), abs=1e-13)


def test_var_statistics_match_scalar_sums():
    hist = list(run(sv_model(), 3, 4, 1, ident, 5))
    for (_, _, _, prev), (s, beta, bs, sm) in zip(hist[1:], hist[2:]):
        A, B = s12_update_scalar(prev.S1, prev.S2, bs.Tes_diag, beta, sm.Tstat)
        np.testing.assert_allclose(sm.S1, A, atol=1e-12)
        np.testing.assert_allclose(sm.S2, B, atol=1e-12)


def test_initial_statistics():
    hist = list(run(sv_model(), 5, 2, 2, ident, 6))
    s, _, bs, sm = hist[2]
    x = ident(s.particles)
    np.testing.assert_allclose(sm.S1, bs.S * np.outer(x, x))
    np.testing.assert_allclose(sm.S2, bs.S * (x[:, None] + x[None, :]))


def test_zero_function():
    for s, _, bs, sm in run(sv_model(), 5, 4, 1, 0.0, 7):
        if s.t >= 1:
            assert sm.smoothed == 0.0
            assert not sm.S1.any() and not sm.S2.any()
            assert smoothing_variance(sm, s, bs) == 0.0


@given(st.floats(-50, 50))
def test_shift_invariance(c):
    base = [smoothing_variance(sm, s, bs) for s, _, bs, sm in run(sv_model(), 6, 5, 2, ident, 8) if s.t >= 2]
    shifted = [
        smoothing_variance(sm, s, bs)
        for s, _, bs, sm in run(sv_model(), 6, 5, 2, lambda x: ident(x) + c, 8)
        if s.t >= 2
    ]
    np.testing.assert_allclose(shifted, base, rtol=1e-9, atol=1e-9 * (1 + c * c))


def test_at_ell_reduces_to_filter_variance():
    for ell in (0, 3):
        for s, _, bs, sm in run(sv_model(), 7, 3, ell, ident, 9):
            if s.t == ell:
                assert smoothing_variance(sm, s, bs) == pytest.approx(bs_es_filter_variance(bs, s, ident), rel=1e-12)


def test_step_mismatch_rejected():
    hist = list(run(sv_model(), 4, 2, 0, ident, 10))
    _, beta, bs, sm = hist[2]
    s1 = hist[1][0]
    with pytest.raises(ValueError, match="step mismatch"):
        smoothing_var_update(hist[1][3], ffbs_forward_update(hist[1][3], beta, ident, hist[2][0]), beta, hist[1][2])
    with pytest.raises(ValueError):
        smoothing_variance(sm, s1, bs)


def test_forward_statistic_is_non_expansive():
    hist = list(run(sv_model(20), 30, 20, 0, ident, 11))
    bound = np.abs(hist[0][3].Tstat).max()
    for _, _, _, sm in hist:
        assert np.abs(sm.Tstat).max() <= bound + 1e-12


def test_additive_update():
    gen = np.random.default_rng(12)
    beta = gen.dirichlet(np.ones(4), size=3)
    prev = gen.normal(size=4)
    np.testing.assert_allclose(ffbs_additive_update(prev, beta, np.zeros((3, 4))), beta @ prev)
    a = gen.normal(size=3)
    np.testing.assert_allclose(ffbs_additive_update(prev, beta, np.tile(a[:, None], (1, 4))), beta @ prev + a)
    pair = gen.normal(size=(3, 4))
    expect = [sum(beta[k, i] * (prev[i] + pair[k, i]) for i in range(4)) for k in range(3)]
    np.testing.assert_allclose(ffbs_additive_update(prev, beta, pair), expect)
