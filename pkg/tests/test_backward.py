import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import mask_stat_enumeration, s_update_scalar, t0_update_scalar, tes_diag_scalar
from smcvar.backward import (
    all_masks,
    backward_from_log,
    backward_matrix,
    bs_init,
    bs_tbt_var_eta,
    bs_tbt_variance,
    bs_update,
    bs_var_eta,
    bs_var_gamma,
    bs_var_phi,
    disjointness,
    lumped_init,
    lumped_update,
    lumped_var_eta,
    lumped_var_gamma,
    mask_identity_deviation,
    mask_statistics,
    mu_hat,
    tbt_gamma_q,
)
from smcvar.core import FilterState, Model, filter_step, init_filter, run_filter, run_filter_batch
from smcvar.models import StochasticVolatility, sv_simulate
from smcvar.oracle import DiscreteHmm, exact_asym_var, exact_mu
from smcvar.rng import RngStream


def state_at(particles, weights, t=0, log_gamma1=0.0):
    particles = np.asarray(particles, float)
    w = np.asarray(weights, float)
    n = len(w)
    return FilterState(t, particles, w, w / w.sum(), float(w.sum()), log_gamma1, np.arange(n), np.arange(n)[None])


class TableModel(Model):
    """Transition density read from a fixed table ``dens[prev_index, next_index]``."""

    def __init__(self, dens):
        self.dens = np.asarray(dens, float)

    def trans_density(self, x_prev, x_next, t):
        return self.dens[np.asarray(x_prev, int), np.asarray(x_next, int)]


def random_run(seed, n, t, k=2):
    hmm = DiscreteHmm.random(np.random.default_rng(seed), n_states=k, horizon=t)
    states = list(run_filter(hmm, n, t, RngStream(seed)))
    betas = [backward_matrix(states[s - 1], states[s].particles, hmm) for s in range(1, t + 1)]
    ws = [states[s - 1].norm_weights for s in range(1, t + 1)]
    return hmm, states, betas, ws


def advance(betas, ws, n, track_s=True):
    st_ = bs_init(n, track_s)
    out = [st_]
    for b, w in zip(betas, ws):
        st_ = bs_update(st_, b, w)
        out.append(st_)
    return out


class TestBackwardMatrix:
    def test_constant_density_gives_weights(self):
        prev = state_at([0.0, 1.0, 2.0], [1.0, 2.0, 5.0])
        beta = backward_matrix(prev, np.array([0, 1, 2, 0]), TableModel(np.full((3, 3), 0.7)))
        np.testing.assert_allclose(beta, np.tile(prev.norm_weights, (4, 1)))

    def test_single_particle(self):
        prev = state_at([0.0], [2.0])
        assert np.array_equal(backward_matrix(prev, np.array([0]), TableModel([[0.3]])), [[1.0]])

    def test_hand_ratio(self):
        # omega = (1, 3); m(xi^1, .) = 2 and m(xi^2, .) = 1 at the target
        prev = state_at([0, 1], [1.0, 3.0])
        beta = backward_matrix(prev, np.array([0]), TableModel([[2.0], [1.0]]))
        np.testing.assert_allclose(beta, [[2 / 5, 3 / 5]])

    def test_zero_row_raises(self):
        prev = state_at([0, 1], [1.0, 1.0])
        with pytest.raises(ValueError, match="backward kernel undefined"):
            backward_matrix(prev, np.array([0, 1]), TableModel([[1.0, 0.0], [1.0, 0.0]]))

    def test_log_space_survives_underflow(self):
        beta = backward_from_log(np.array([[-2000.0, -2001.0]]), np.log([0.5, 0.5]))
        np.testing.assert_allclose(beta, [[1 / (1 + math.exp(-1)), math.exp(-1) / (1 + math.exp(-1))]])

    @given(st.integers(1, 12), st.integers(0, 2**31))
    def test_row_stochastic(self, n, seed):
        gen = np.random.default_rng(seed)
        _, y = sv_simulate(3, gen)
        model = StochasticVolatility(y)
        prev = init_filter(model, n, gen)
        nxt = filter_step(prev, model, gen)
        beta = backward_matrix(prev, nxt.particles, model)
        assert np.all(beta >= 0) and np.all(beta <= 1)
        np.testing.assert_allclose(beta.sum(axis=1), 1.0, atol=1e-12)

    def test_conditional_identity(self):
        # E[beta(xi_t^k, l) h(xi_t^k) | F_{t-1}] = W^l_{t-1} M_t[h](xi^l_{t-1})
        _, y = sv_simulate(5, RngStream(0))
        model = StochasticVolatility(y)
        prev = init_filter(model, 5, RngStream(1))
        gen = RngStream(2)
        m = 200_000
        parents = gen.choice(5, size=m, p=prev.norm_weights)
        fresh = model.trans_sample(gen, prev.particles[parents], 1)
        beta = backward_matrix(prev, fresh, model)
        samples = beta * fresh[:, None]
        target = prev.norm_weights * model.phi * prev.particles
        se = samples.std(axis=0) / np.sqrt(m)
        assert np.all(np.abs(samples.mean(axis=0) - target) < 3.5 * se)


class TestUpdate:
    def test_init(self):
        s = bs_init(3)
        assert np.array_equal(s.T0, 1 - np.eye(3))
        assert np.array_equal(s.S, np.eye(3))
        assert np.array_equal(s.Tes_diag, np.ones(3))

    def test_identity_beta(self):
        w = np.array([0.2, 0.3, 0.5])
        s = bs_update(bs_init(3), np.eye(3), w)
        np.testing.assert_array_equal(s.T0, 1 - np.eye(3))
        np.testing.assert_allclose(s.Tes_diag, 1 - w)

    def test_uniform_beta(self):
        n = 5
        s = bs_update(bs_init(n), np.full((n, n), 1 / n), np.full(n, 1 / n))
        np.testing.assert_allclose(s.T0, (1 - np.eye(n)) * (n - 1) / n)
        np.testing.assert_allclose(s.Tes_diag, (n - 1) / n)

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_matches_scalar_sums(self, n):
        gen = np.random.default_rng(n)
        T0 = 1 - np.eye(n)
        S = np.eye(n)
        for _ in range(3):
            beta = gen.dirichlet(np.ones(n), size=n)
            w = gen.dirichlet(np.ones(n))
            cur = bs_update(type(bs_init(n))(0, T0, np.ones(n), S), beta, w)
            np.testing.assert_allclose(cur.T0, t0_update_scalar(T0, beta), atol=1e-12, rtol=1e-12)
            np.testing.assert_allclose(cur.Tes_diag, tes_diag_scalar(T0, beta, w), atol=1e-12, rtol=1e-12)
            np.testing.assert_allclose(cur.S, s_update_scalar(S, T0, beta, w), atol=1e-12, rtol=1e-12)
            T0, S = cur.T0, cur.S

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            bs_update(bs_init(3), np.eye(4), np.ones(4) / 4)

    @given(st.integers(2, 8), st.integers(1, 6), st.integers(0, 2**31))
    def test_invariants(self, n, t, seed):
        _, _, betas, ws = random_run(seed % 1000, n, t)
        for s in advance(betas, ws, n):
            assert np.array_equal(s.T0, s.T0.T)
            assert np.all(np.diag(s.T0) == 0)
            assert s.T0.min() >= 0 and s.T0.max() <= 1 + 1e-12
            assert s.Tes_diag.min() >= 0 and s.Tes_diag.max() <= 1 + 1e-12

    def test_batched_update_matches_single(self):
        gen = np.random.default_rng(3)
        betas = gen.dirichlet(np.ones(4), size=(5, 4))
        ws = gen.dirichlet(np.ones(4), size=5)
        batch = bs_update(type(bs_init(4))(0, np.broadcast_to(1 - np.eye(4), (5, 4, 4)), np.ones((5, 4)), np.broadcast_to(np.eye(4), (5, 4, 4))), betas, ws)
        for i in range(5):
            single = bs_update(bs_init(4), betas[i], ws[i])
            np.testing.assert_allclose(batch.T0[i], single.T0, atol=1e-15)
            np.testing.assert_allclose(batch.S[i], single.S, atol=1e-15)


class TestEstimators:
    def test_t0_values(self):
        s = state_at([1.0, -1.0], [1.0, 1.0])
        h = np.array([1.0, -1.0])
        stats = bs_init(2)
        assert bs_var_gamma(stats, s, h) == pytest.approx(2.0)
        assert bs_var_eta(stats, s, h) == pytest.approx(2.0)
        assert bs_tbt_variance(stats, s, h) == pytest.approx(2.0)

    def test_constant_function(self):
        _, states, betas, ws = random_run(1, 6, 3)
        stats = advance(betas, ws, 6)
        for st_, s in zip(stats, states):
            assert bs_var_eta(st_, s, 3.0) == pytest.approx(0.0, abs=1e-12)
            assert bs_var_phi(st_, s, 3.0) == pytest.approx(0.0, abs=1e-12)
            assert bs_tbt_var_eta(st_, s, 3.0) == pytest.approx(0.0, abs=1e-12)
            assert bs_tbt_variance(st_, s, 0.0) == 0.0

    def test_constant_function_at_t0_matches_term_by_term(self):
        n, c = 5, 1.7
        s = state_at(np.arange(n), np.ones(n), log_gamma1=0.3)
        closed = n * c**2 * (1 - n / (n - 1) * (n * (n - 1)) / n**2) * math.exp(0.6)
        assert bs_var_gamma(bs_init(n), s, c) == pytest.approx(closed, abs=1e-12)
        assert bs_var_gamma(bs_init(n), s, c) == pytest.approx(bs_tbt_variance(bs_init(n), s, c), abs=1e-12)

    def test_closed_forms(self):
        hmm, states, betas, ws = random_run(2, 7, 3, k=3)
        st_ = advance(betas, ws, 7)[-1]
        s = states[-1]
        h = np.array([0.5, -1.0, 2.0])[s.particles]
        n, t, g2 = 7, 3, math.exp(2 * s.log_gamma1)
        T0, S, W = st_.T0, st_.S, s.norm_weights
        assert bs_var_gamma(st_, s, h) == pytest.approx(n * g2 * (h.mean() ** 2 - n ** (t - 1) / (n - 1) ** (t + 1) * h @ T0 @ h))
        f = h - h.mean()
        assert bs_var_eta(st_, s, h) == pytest.approx(-(n**t) / (n - 1) ** (t + 1) * f @ T0 @ f)
        wf = W * (h - W @ h)
        assert bs_var_phi(st_, s, h) == pytest.approx(-(n ** (t + 2)) / (n - 1) ** (t + 1) * wf @ T0 @ wf)
        tbt = n ** (t - 1) * g2 / (n - 1) ** t * (h @ S @ h - (t + 1) / (n - 1) * h @ T0 @ h)
        assert bs_tbt_variance(st_, s, h) == pytest.approx(tbt)

    def test_large_t_prefactors_stay_finite(self):
        q = tbt_gamma_q(50, 3000, -20.0, 2.0, 0.01)
        assert np.isfinite(q) and q > 0

    def test_single_particle_refused(self):
        s = state_at([0.0], [1.0])
        for fn in (bs_var_gamma, bs_var_eta, bs_var_phi, bs_tbt_variance):
            with pytest.raises(ValueError, match="N >= 2"):
                fn(bs_init(1), s, 1.0)

    def test_time_mismatch(self):
        _, states, betas, ws = random_run(3, 4, 2)
        with pytest.raises(ValueError):
            bs_var_eta(bs_init(4), states[2], 1.0)


class TestMasks:
    def test_masks_enumerated(self):
        assert all_masks(2).shape == (8, 3)
        assert len({tuple(m) for m in all_masks(3)}) == 16

    @pytest.mark.parametrize("n,t", [(2, 1), (3, 2), (2, 2)])
    def test_recursion_matches_path_enumeration(self, n, t):
        _, _, betas, ws = random_run(10 + n + t, n, t)
        masks = all_masks(t)
        T = mask_statistics(betas, ws, masks)
        for i, m in enumerate(masks):
            np.testing.assert_allclose(T[i], mask_stat_enumeration(betas, ws, m), atol=1e-13)

    def test_zero_and_unit_masks_match_update(self):
        _, _, betas, ws = random_run(4, 4, 3)
        masks = all_masks(3)
        T = mask_statistics(betas, ws, masks)
        last = advance(betas, ws, 4)[-1]
        np.testing.assert_allclose(T[0], last.T0, atol=1e-15)
        unit = [i for i, m in enumerate(masks) if m.sum() == 1]
        np.testing.assert_allclose(T[unit].sum(axis=0), last.S, atol=1e-15)

    @given(st.integers(2, 4), st.integers(0, 3), st.integers(0, 2**31))
    def test_sum_over_masks_is_one(self, n, t, seed):
        _, _, betas, ws = random_run(seed % 997, n, t)
        T = mask_statistics(betas, ws, all_masks(t), n=n)
        np.testing.assert_allclose(T.sum(axis=0), 1.0, atol=1e-10)

    def test_identity_at_t0(self):
        h = np.array([0.3, -1.2, 2.0])
        assert mask_identity_deviation([], [], h, 0.4) < 1e-15

    @pytest.mark.parametrize("n,t", [(3, 2), (4, 3)])
    def test_identity(self, n, t):
        _, states, betas, ws = random_run(20 + t, n, t, k=3)
        h = np.array([1.0, -0.4, 2.2])[states[t].particles]
        assert mask_identity_deviation(betas, ws, h, states[t].log_gamma1) <= 1e-9

    def test_identity_refuses_large_t(self):
        _, states, betas, ws = random_run(5, 2, 4)
        with pytest.raises(ValueError, match="refusing"):
            mask_identity_deviation(betas, ws, np.ones(2), states[4].log_gamma1)

    def test_mu_hat_unbiased_per_mask(self):
        hmm = DiscreteHmm([0.4, 0.6], [[0.7, 0.3], [0.2, 0.8]], [[1.0, 0.5], [0.4, 1.3], [1.0, 1.0]])
        h = np.array([1.0, -0.7])
        t, n, r = 2, 5, 40_000
        states = list(run_filter_batch(hmm, n, t, r, RngStream(77)))
        betas = [backward_matrix(states[s - 1], states[s].particles, hmm, s) for s in (1, 2)]
        ws = [states[0].norm_weights, states[1].norm_weights]
        masks = all_masks(t)
        hv = h[states[t].particles]
        mu = mu_hat(mask_statistics(betas, ws, masks), masks, states[t].log_gamma1, hv[:, :, None] * hv[:, None, :])
        exact = np.array([exact_mu(hmm, m, h) for m in masks])
        se = mu.std(axis=0, ddof=1) / np.sqrt(r)
        assert np.all(np.abs(mu.mean(axis=0) - exact) < 4 * se)


class TestLumped:
    def test_matches_dense(self):
        hmm = DiscreteHmm.random(np.random.default_rng(8), n_states=3, horizon=5)
        n = 60
        states = list(run_filter(hmm, n, 5, RngStream(8)))
        h = np.array([0.2, -1.0, 1.5])
        dense = bs_init(n, track_s=False)
        lump = lumped_init(states[0].particles, 3)
        for s in range(1, 6):
            beta = backward_matrix(states[s - 1], states[s].particles, hmm)
            dense = bs_update(dense, beta, states[s - 1].norm_weights)
            lump = lumped_update(lump, hmm.trans, hmm.g(s - 1), states[s].particles)
            st_ = states[s]
            a = lumped_var_eta(lump, h)
            b = bs_var_eta(dense, st_, h[st_.particles])
            assert a == pytest.approx(b, rel=1e-10, abs=1e-12)
            a = lumped_var_gamma(lump, h, st_.log_gamma1)
            b = bs_var_gamma(dense, st_, h[st_.particles])
            assert a == pytest.approx(b, rel=1e-10, abs=1e-12)

    def test_var_gamma_discrete_n2000(self):
        hmm = DiscreteHmm([0.4, 0.6], [[0.9, 0.1], [0.25, 0.75]], [[1.2, 0.5], [0.7, 1.4], [1.0, 1.0]])
        h = np.array([1.0, -1.0])
        t, n, reps = 2, 2000, 200
        vals = []
        for r in range(reps):
            states = list(run_filter(hmm, n, t, RngStream(31, r)))
            lump = lumped_init(states[0].particles, 2)
            for s in range(1, t + 1):
                lump = lumped_update(lump, hmm.trans, hmm.g(s - 1), states[s].particles)
            vals.append(lumped_var_gamma(lump, h, states[t].log_gamma1))
        exact = exact_asym_var(hmm, t, h, "gamma")
        assert abs(np.mean(vals) / exact - 1) < 0.15


def test_disjointness_decreases_in_median():
    _, y = sv_simulate(41, RngStream(4))
    model = StochasticVolatility(y)
    n, T, runs = 100, 40, 30
    d = np.zeros((runs, T + 1))
    for r in range(runs):
        rng = RngStream(5, r)
        s = init_filter(model, n, rng)
        stats = bs_init(n, track_s=False)
        d[r, 0] = disjointness(stats.T0)
        for t in range(1, T + 1):
            prev, s = s, filter_step(s, model, rng)
            stats = bs_update(stats, backward_matrix(prev, s.particles, model), prev.norm_weights)
            d[r, t] = disjointness(stats.T0)
    med = np.median(d, axis=0)
    slack = 2 * d.std(axis=0).max() / np.sqrt(runs)
    assert np.all(np.diff(med) <= slack)



@pytest.mark.parametrize("target,fn", [("eta", bs_var_eta), ("phi", bs_var_phi), ("gamma", bs_var_gamma)])
def test_estimators_near_exact_variance(target, fn):
    hmm = DiscreteHmm([0.4, 0.6], [[0.9, 0.1], [0.25, 0.75]], [[1.2, 0.5], [0.7, 1.4], [1.5, 0.6], [0.6, 1.3]])
    h = np.array([1.0, -1.0])
    n, t, runs = 400, 3, 60
    vals = []
    for r in range(runs):
        states = list(run_filter(hmm, n, t, RngStream(1, r)))
        stats = advance(
            [backward_matrix(states[s - 1], states[s].particles, hmm) for s in range(1, t + 1)],
            [states[s - 1].norm_weights for s in range(1, t + 1)],
            n,
            track_s=False,
        )[-1]
        vals.append(fn(stats, states[t], h[states[t].particles]))
    assert abs(np.mean(vals) / exact_asym_var(hmm, t, h, target) - 1) < 0.03
