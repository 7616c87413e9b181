"""Forward-only FFBS and the online marginal-smoothing variance estimator.

For a marginal functional ``h_ell(x_ell)`` the FFBS estimate at ``t >= ell``
is ``sum_i W_t^i Tstat_i`` where ``Tstat`` is propagated through the
backward matrices. Its asymptotic variance is estimated from two extra
N x N statistics, ``S1`` and ``S2``, updated alongside the backward
statistics ``S`` and ``T^{e_t}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from smcvar.backward import BsStats, sandwich_offdiag, scaled
from smcvar.core import FilterState, h_values, require_pairs


@dataclass
class SmoothingStats:
    """Statistics for the marginal at time ``ell``; empty while ``t < ell``."""

    ell: int
    t: int
    Tstat: np.ndarray | None = None
    S1: np.ndarray | None = None
    S2: np.ndarray | None = None
    smoothed: float | None = None


def smoothing_init(ell: int) -> SmoothingStats:
    if ell < 0:
        raise ValueError("ell must be nonnegative")
    return SmoothingStats(ell=int(ell), t=0)


def ffbs_forward_update(stats: SmoothingStats, beta, h_ell, state: FilterState) -> SmoothingStats:
    """Advance ``Tstat`` and the FFBS estimate to ``state.t``.

    Before ``ell`` nothing is tracked. At ``ell`` the statistic starts as the
    test function values; afterwards it is averaged through ``beta``.
    """
    t = state.t
    if t < stats.ell:
        return replace(stats, t=t)
    if t == stats.ell:
        tstat = h_values(h_ell, state.particles).copy()
    else:
        if stats.Tstat is None or stats.t != t - 1:
            raise ValueError("smoothing statistics are not at the previous time step")
        tstat = np.asarray(beta) @ stats.Tstat
    return replace(stats, t=t, Tstat=tstat, smoothed=float(state.norm_weights @ tstat))


def smoothing_var_update(prev: SmoothingStats, curr: SmoothingStats, beta, bs_stats: BsStats) -> SmoothingStats:
    """Fill ``S1`` and ``S2`` of ``curr`` (already forward-updated) from ``prev``.

    ``bs_stats`` must be the backward statistics at ``curr.t`` with ``S``
    tracked.
    """
    if bs_stats.t != curr.t:
        raise ValueError("step mismatch between smoothing and backward statistics")
    if bs_stats.S is None:
        raise ValueError("backward statistics must track S")
    t = curr.t
    if t < curr.ell:
        return curr
    x = curr.Tstat
    if t == curr.ell:
        S1 = bs_stats.S * np.outer(x, x)
        S2 = bs_stats.S * (x[:, None] + x[None, :])
        return replace(curr, S1=S1, S2=S2)
    if prev.S1 is None or prev.t != t - 1:
        raise ValueError("smoothing statistics are not at the previous time step")
    beta = np.asarray(beta)
    idx = np.arange(len(x))
    S1 = sandwich_offdiag(beta, prev.S1)
    S1[idx, idx] = bs_stats.Tes_diag * x * x
    S2 = sandwich_offdiag(beta, prev.S2)
    S2[idx, idx] = bs_stats.Tes_diag * 2.0 * x
    return replace(curr, S1=S1, S2=S2)


def smoothing_update(stats: SmoothingStats, beta, h_ell, state: FilterState, bs_stats: BsStats) -> SmoothingStats:
    """Forward and variance updates in one call."""
    return smoothing_var_update(stats, ffbs_forward_update(stats, beta, h_ell, state), beta, bs_stats)


def smoothing_variance(stats: SmoothingStats, state: FilterState, bs_stats: BsStats) -> float:
    """Estimated asymptotic variance of the FFBS estimate of ``E[h_ell(X_ell) | y_{0:t}]``.

    ``N (N/(N-1))^t sum_{i,j} W_i W_j Sbar(i, j)`` with
    ``Sbar = S1 - Q S2 + Q^2 S`` and ``Q`` the current FFBS estimate.
    """
    n, t = state.n, state.t
    require_pairs(n)
    if stats.t != t or bs_stats.t != t:
        raise ValueError("statistics and state are at different time steps")
    if t < stats.ell or stats.S1 is None:
        raise ValueError("smoothing variance is only defined for t >= ell")
    q = stats.smoothed
    w = state.norm_weights
    sbar = stats.S1 - q * stats.S2 + q * q * bs_stats.S
    return scaled(math.log(n) + t * (math.log(n) - math.log(n - 1)), w @ sbar @ w)


def ffbs_additive_update(tstat_prev, beta, h_pair) -> np.ndarray:
    """One step of the forward-only FFBS recursion for additive functionals.

    For ``h_{0:t} = h_0(x_0) + sum_s h_s(x_{s-1}, x_s)``,
    ``Tstat_t(k) = sum_i beta(k, i) [Tstat_{t-1}(i) + h_t(xi_{t-1}^i, xi_t^k)]``
    where ``h_pair[k, i] = h_t(xi_{t-1}^i, xi_t^k)``. Start from
    ``Tstat_0 = h_0`` at the initial particles.
    """
    beta = np.asarray(beta)
    return np.sum(beta * (np.asarray(tstat_prev)[None, :] + np.asarray(h_pair)), axis=1)
