"""Backward weights and the backward-sampling variance estimators.

The coalescence statistics are N x N matrices indexed by pairs of particles
at the current time:

* ``T0[k, l]`` is the probability that two backward trajectories started
  from particles ``k`` and ``l`` never meet;
* ``S`` aggregates, over ``s <= t``, the probability that they meet at time
  ``s`` only.

All array kernels here accept leading batch axes so that many independent
runs can be advanced with a single batched matrix product.

Prefactors such as ``N^t / (N-1)^(t+1) * gamma_t^N(1)^2`` are assembled in
log space and exponentiated once, together with the quadratic form they
multiply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from smcvar.core import FilterState, Model, h_values, require_pairs


def _T(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def zero_diagonal(a: np.ndarray) -> np.ndarray:
    """Zero the diagonal of the last two axes, in place."""
    idx = np.arange(a.shape[-1])
    a[..., idx, idx] = 0.0
    return a


def diag_embed(v: np.ndarray) -> np.ndarray:
    n = v.shape[-1]
    out = np.zeros(v.shape + (n,))
    idx = np.arange(n)
    out[..., idx, idx] = v
    return out


def scaled(log_factor, q):
    """``exp(log_factor) * q`` without forming ``exp(log_factor)`` alone."""
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.sign(q) * np.exp(log_factor + np.log(np.abs(q)))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# backward weights


def backward_matrix(prev: FilterState, curr_particles, model: Model, t: int | None = None) -> np.ndarray:
    """Row-stochastic matrix ``beta[k, l]`` of backward weights.

    ``beta[k, l]`` is proportional to ``omega_{t-1}^l m_t(xi_{t-1}^l, xi_t^k)``.
    Rows are normalized in log space; a row whose densities all vanish
    violates the positivity assumption on the kernel and raises.
    """
    t = prev.t + 1 if t is None else t
    logm = model.trans_logdensity_matrix(prev.particles, curr_particles, t)
    return backward_from_log(logm, np.log(prev.weights))


def backward_from_log(logm: np.ndarray, log_weights: np.ndarray) -> np.ndarray:
    b = logm + log_weights[..., None, :]
    top = b.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise ValueError("backward kernel undefined: a row has zero total density")
    b -= top
    np.exp(b, out=b)
    b /= b.sum(axis=-1, keepdims=True)
    return b


# ---------------------------------------------------------------------------
# exact recursions


@dataclass
class BsStats:
    """Backward-sampling coalescence statistics at time ``t``.

    ``Tes_diag`` holds the diagonal of ``T^{e_t}_t`` (its off-diagonal part
    is zero). ``S`` is ``None`` when only the disjoint estimators are needed.
    """

    t: int
    T0: np.ndarray
    Tes_diag: np.ndarray
    S: np.ndarray | None = None


def bs_init(n: int, track_s: bool = True) -> BsStats:
    return BsStats(
        t=0,
        T0=1.0 - np.eye(n),
        Tes_diag=np.ones(n),
        S=np.eye(n) if track_s else None,
    )


def sandwich_offdiag(beta: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``beta @ m @ beta.T`` with the diagonal zeroed."""
    return zero_diagonal(beta @ m @ _T(beta))


def bs_update(stats: BsStats, beta: np.ndarray, prev_norm_weights: np.ndarray) -> BsStats:
    """Advance ``T0``, ``T^{e_t}`` and ``S`` by one step."""
    beta = np.asarray(beta)
    n = stats.T0.shape[-1]
    if beta.shape[-2:] != (n, n) or prev_norm_weights.shape[-1] != n:
        raise ValueError("dimension mismatch between statistics and backward matrix")
    left = beta @ stats.T0
    T0 = left @ _T(beta)
    # exact arithmetic keeps T0 symmetric; restore it after rounding
    T0 = 0.5 * (T0 + _T(T0))
    zero_diagonal(T0)
    tes = (left @ prev_norm_weights[..., None])[..., 0]
    S = None
    if stats.S is not None:
        S = sandwich_offdiag(beta, stats.S)
        idx = np.arange(n)
        S[..., idx, idx] = tes
    return BsStats(t=stats.t + 1, T0=T0, Tes_diag=tes, S=S)


def disjointness(T0: np.ndarray) -> float:
    """``D^BS_N(t)``: average of ``T0`` over ordered pairs."""
    n = T0.shape[-1]
    return T0.sum(axis=(-2, -1)) / (n * (n - 1))


# ---------------------------------------------------------------------------
# estimators written in terms of quadratic forms
#
# ``q = sum_{k,l} T(k,l) f_k f_l`` is all any estimator needs from the
# statistics, which lets the lumped (finite state space) path below reuse
# the exact same formulas.


def var_gamma_q(n, t, log_gamma1, eta, q):
    log_ng2 = math.log(n) + 2.0 * log_gamma1
    return np.exp(log_ng2) * eta**2 - scaled(log_ng2 + (t - 1) * math.log(n) - (t + 1) * math.log(n - 1), q)


def var_eta_q(n, t, q):
    return -scaled(t * math.log(n) - (t + 1) * math.log(n - 1), q)


def var_phi_q(n, t, q):
    return -scaled((t + 2) * math.log(n) - (t + 1) * math.log(n - 1), q)


def tbt_gamma_q(n, t, log_gamma1, q_s, q_0):
    q = q_s - (t + 1) / (n - 1) * q_0
    return scaled((t - 1) * math.log(n) - t * math.log(n - 1) + 2.0 * log_gamma1, q)


def _check(stats, state: FilterState):
    require_pairs(state.n)
    if stats.t != state.t:
        raise ValueError("statistics and state are at different time steps")


def bs_var_gamma(stats: BsStats, state: FilterState, h) -> float:
    """Disjoint estimate of ``sigma^2_{gamma,t}(h)``."""
    _check(stats, state)
    hv = h_values(h, state.particles)
    return var_gamma_q(state.n, state.t, state.log_gamma1, hv.mean(), hv @ stats.T0 @ hv)


def bs_var_eta(stats: BsStats, state: FilterState, h) -> float:
    """Disjoint estimate of the asymptotic variance of ``eta_t^N(h)``."""
    _check(stats, state)
    hv = h_values(h, state.particles)
    f = hv - hv.mean()
    return var_eta_q(state.n, state.t, f @ stats.T0 @ f)


def bs_var_phi(stats: BsStats, state: FilterState, h) -> float:
    """Disjoint estimate of the asymptotic variance of ``phi_t^N(h)``."""
    _check(stats, state)
    hv = h_values(h, state.particles)
    wf = state.norm_weights * (hv - state.norm_weights @ hv)
    return var_phi_q(state.n, state.t, wf @ stats.T0 @ wf)


def bs_tbt_variance(stats: BsStats, state: FilterState, h) -> float:
    """Term-by-term (unbiased) estimate of ``sigma^2_{gamma,t}(h)``."""
    _check(stats, state)
    if stats.S is None:
        raise ValueError("term-by-term estimator needs S; build stats with track_s=True")
    hv = h_values(h, state.particles)
    return tbt_gamma_q(state.n, state.t, state.log_gamma1, hv @ stats.S @ hv, hv @ stats.T0 @ hv)


def bs_tbt_var_eta(stats: BsStats, state: FilterState, h) -> float:
    """Term-by-term estimate for the predictor: centered, divided by ``gamma_t^N(1)^2``."""
    _check(stats, state)
    if stats.S is None:
        raise ValueError("term-by-term estimator needs S; build stats with track_s=True")
    hv = h_values(h, state.particles)
    f = hv - hv.mean()
    return tbt_gamma_q(state.n, state.t, 0.0, f @ stats.S @ f, f @ stats.T0 @ f)


# ---------------------------------------------------------------------------
# general masks


def all_masks(t: int) -> np.ndarray:
    """Every mask in ``{0, 1}^(t+1)``, one per row."""
    return np.array(list(product((0, 1), repeat=t + 1)), dtype=int).reshape(-1, t + 1)


def mask_statistics(betas, prev_weights, masks, n: int | None = None) -> np.ndarray:
    """``T^b_t`` for each mask ``b``, from the full backward history.

    Args:
        betas: sequence of backward matrices ``beta_1, ..., beta_t``, each of
            shape ``(..., N, N)``.
        prev_weights: normalized weights ``W_0, ..., W_{t-1}``.
        masks: integer array of shape ``(B, t + 1)``.
        n: number of particles; only needed when ``betas`` is empty.

    Returns:
        Array of shape ``(..., B, N, N)``.
    """
    masks = np.atleast_2d(np.asarray(masks, dtype=int))
    t = len(betas)
    if masks.shape[1] != t + 1:
        raise ValueError("masks must have t + 1 entries")
    if t:
        n = np.shape(betas[0])[-1]
        lead = np.shape(betas[0])[:-2]
    elif n is None:
        raise ValueError("n is required when there are no backward matrices")
    else:
        lead = ()
    betas = [np.asarray(b) for b in betas]
    weights = [np.asarray(w)[..., :, None] for w in prev_weights]
    eye = np.eye(n)
    # masks sharing a prefix share the recursion up to that point
    cache: dict[tuple, np.ndarray] = {}

    def stat(prefix: tuple) -> np.ndarray:
        if prefix in cache:
            return cache[prefix]
        s = len(prefix) - 1
        if s == 0:
            out = np.broadcast_to(eye if prefix[0] == 1 else 1.0 - eye, lead + (n, n))
        else:
            prev = stat(prefix[:-1])
            beta = betas[s - 1]
            # after a b_s = 1 step (or b_0 = 1) the statistic is diagonal
            if prefix[-2] == 1:
                d = np.diagonal(prev, axis1=-2, axis2=-1)
                if prefix[-1] == 0:
                    out = zero_diagonal((beta * d[..., None, :]) @ _T(beta))
                else:
                    out = diag_embed((beta @ (d * weights[s - 1][..., 0])[..., None])[..., 0])
            elif prefix[-1] == 0:
                out = sandwich_offdiag(beta, prev)
            else:
                out = diag_embed((beta @ (prev @ weights[s - 1]))[..., 0])
        cache[prefix] = out
        return out

    T = np.stack([stat(tuple(int(v) for v in b)) for b in masks], axis=-3)
    # the recursive closure forms a reference cycle; free the cache now
    cache.clear()
    return T


def mu_hat(T_b: np.ndarray, masks, log_gamma1, F) -> np.ndarray:
    """Estimates of ``mu_{b,t}(F)`` from the statistics ``T^b_t``.

    Args:
        T_b: array ``(..., B, N, N)`` as returned by :func:`mask_statistics`.
        masks: array ``(B, t + 1)``.
        log_gamma1: ``log gamma_t^N(1)``, scalar or with the leading shape.
        F: pair values ``F[k, l] = F(xi^k_t, xi^l_t)``, ``(..., N, N)``.

    Returns:
        Array of shape ``(..., B)``.
    """
    masks = np.atleast_2d(np.asarray(masks))
    n = T_b.shape[-1]
    t = masks.shape[1] - 1
    ones = masks.sum(axis=1)
    log_pref = ones * math.log(n) + (t + 1 - ones) * (math.log(n) - math.log(n - 1)) - 2.0 * math.log(n)
    log_pref = log_pref + 2.0 * np.asarray(log_gamma1, dtype=float)[..., None]
    q = np.einsum("...bkl,...kl->...b", T_b, np.asarray(F, dtype=float))
    return np.asarray(scaled(log_pref, q))


MAX_IDENTITY_T = 3


def mask_identity_deviation(betas, prev_weights, h_vals, log_gamma1, max_t: int = MAX_IDENTITY_T) -> float:
    """Relative gap in the mask-sum identity for one realization.

    Sums ``prod_s N^{-b_s} ((N-1)/N)^{1-b_s} mu_hat_b(h x h)`` over every mask
    and compares it with ``gamma_t^N(h)^2``. The gap is scaled by
    ``gamma_t^N(|h|)^2`` so it stays meaningful when ``gamma_t^N(h)`` is
    near zero.
    """
    t = len(betas)
    if t > max_t:
        raise ValueError(f"refusing exhaustive mask recursion for t={t} > {max_t}")
    h_vals = np.asarray(h_vals, dtype=float)
    n = len(h_vals)
    require_pairs(n)
    masks = all_masks(t)
    T = mask_statistics(betas, prev_weights, masks, n=n)
    mu = mu_hat(T, masks, log_gamma1, np.outer(h_vals, h_vals))
    ones = masks.sum(axis=1)
    w = np.exp(-ones * math.log(n) + (t + 1 - ones) * (math.log(n - 1) - math.log(n)))
    lhs = float(w @ mu)
    g1 = math.exp(log_gamma1)
    rhs = (g1 * h_vals.mean()) ** 2
    scale = (g1 * np.abs(h_vals).mean()) ** 2
    return abs(lhs - rhs) / scale


# ---------------------------------------------------------------------------
# finite state spaces
#
# When particles live in {0, ..., K-1}, T0(k, l) for k != l depends only on
# the states of k and l. Tracking that K x K table instead of the N x N
# matrix gives the same estimates at a cost independent of N.


@dataclass
class LumpedBsStats:
    """``C[a, b]`` is ``T0(k, l)`` for any ``k != l`` in states ``a``, ``b``."""

    t: int
    C: np.ndarray
    counts: np.ndarray


def lumped_init(states, n_states: int) -> LumpedBsStats:
    counts = np.bincount(np.asarray(states), minlength=n_states).astype(float)
    return LumpedBsStats(t=0, C=np.ones((n_states, n_states)), counts=counts)


def lumped_update(stats: LumpedBsStats, trans: np.ndarray, prev_potential: np.ndarray, states) -> LumpedBsStats:
    """One exact step of the lumped ``T0`` recursion.

    Args:
        trans: transition matrix ``P[c, a] = m_t(c, a)``.
        prev_potential: ``g_{t-1}`` on the states.
        states: particle states at time ``t``.
    """
    n_states = len(stats.counts)
    counts = np.bincount(np.asarray(states), minlength=n_states).astype(float)
    # unnormalized backward mass from a state-a particle to one state-c particle
    back = prev_potential[None, :] * trans.T
    Z = back @ stats.counts
    if np.any((Z <= 0) & (counts > 0)):
        raise ValueError("backward kernel undefined: a row has zero total density")
    back = np.divide(back, Z[:, None], out=np.zeros_like(back), where=Z[:, None] > 0)
    scaled_back = back * stats.counts[None, :]
    C = scaled_back @ stats.C @ scaled_back.T - (scaled_back * np.diag(stats.C)) @ back.T
    return LumpedBsStats(t=stats.t + 1, C=0.5 * (C + C.T), counts=counts)


def lumped_quadratic(stats: LumpedBsStats, f_states) -> float:
    """``sum_{k != l} T0(k, l) f_k f_l`` for ``f`` given per state."""
    f_states = np.asarray(f_states, dtype=float)
    F = stats.counts * f_states
    return float(F @ stats.C @ F - np.sum(np.diag(stats.C) * stats.counts * f_states**2))


def lumped_var_eta(stats: LumpedBsStats, h_states) -> float:
    n = int(stats.counts.sum())
    require_pairs(n)
    h_states = np.asarray(h_states, dtype=float)
    eta = stats.counts @ h_states / n
    return var_eta_q(n, stats.t, lumped_quadratic(stats, h_states - eta))


def lumped_var_gamma(stats: LumpedBsStats, h_states, log_gamma1: float) -> float:
    n = int(stats.counts.sum())
    require_pairs(n)
    h_states = np.asarray(h_states, dtype=float)
    eta = stats.counts @ h_states / n
    return var_gamma_q(n, stats.t, log_gamma1, eta, lumped_quadratic(stats, h_states))


def bs_es_filter_variance(stats: BsStats, state: FilterState, h) -> float:
    """Filter variance from the aggregated ``e_s`` terms only.

    ``N (N/(N-1))^t sum_{i,j} W_i W_j S(i, j) f_i f_j`` with
    ``f = h - phi_t^N(h)``. This is what the marginal smoothing estimator
    reduces to when the smoothing time equals the current time.
    """
    _check(stats, state)
    if stats.S is None:
        raise ValueError("needs S; build stats with track_s=True")
    n, t = state.n, state.t
    hv = h_values(h, state.particles)
    wf = state.norm_weights * (hv - state.norm_weights @ hv)
    return scaled(math.log(n) + t * (math.log(n) - math.log(n - 1)), wf @ stats.S @ wf)
