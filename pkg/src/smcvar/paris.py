"""PaRIS approximation of the backward-sampling statistics.

Instead of averaging over the full backward matrix, each particle draws
``M`` indices from its row of the backward matrix and the pair statistics
are averaged over those draws. This costs O(M N^2) per step instead of
O(N^3) and keeps ``T0_tilde`` conditionally unbiased for ``T0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from smcvar.backward import var_eta_q, var_gamma_q, var_phi_q, zero_diagonal
from smcvar.core import FilterState, h_values, require_pairs
from smcvar.rng import categorical_rows


def _check_m(m: int) -> None:
    if m <= 1:
        raise ValueError("PaRIS requires M > 1")


@dataclass
class ParisStats:
    """``J`` holds the indices drawn for the latest update (``None`` at t=0)."""

    t: int
    T0_tilde: np.ndarray
    M: int
    J: np.ndarray | None = None


def paris_init(n: int, m: int) -> ParisStats:
    _check_m(m)
    return ParisStats(t=0, T0_tilde=1.0 - np.eye(n), M=int(m))


def paris_sample_indices(beta: np.ndarray, m: int, rng) -> np.ndarray:
    """``J[k, i]``: ``m`` i.i.d. draws from row ``k`` of ``beta``."""
    _check_m(m)
    return categorical_rows(rng, beta, m)


def _pair_average(T: np.ndarray, J: np.ndarray) -> np.ndarray:
    acc = np.zeros((J.shape[0], J.shape[0]))
    for col in J.T:
        acc += T[np.ix_(col, col)]
    return acc / J.shape[1]


def paris_update(stats: ParisStats, J: np.ndarray, prev_norm_weights=None) -> ParisStats:
    """Sampled-mean update of ``T0_tilde`` from the index buffer ``J``.

    ``prev_norm_weights`` is accepted for symmetry with the exact update; the
    disjoint statistic does not use it.
    """
    J = np.asarray(J)
    n = stats.T0_tilde.shape[0]
    if J.ndim != 2 or J.shape[0] != n:
        raise ValueError("index buffer must have shape (N, M)")
    _check_m(J.shape[1])
    T = zero_diagonal(_pair_average(stats.T0_tilde, J))
    return ParisStats(t=stats.t + 1, T0_tilde=T, M=stats.M, J=J)


def paris_step(stats: ParisStats, beta: np.ndarray, rng) -> ParisStats:
    """Draw a fresh index buffer and apply it."""
    return paris_update(stats, paris_sample_indices(beta, stats.M, rng))


def paris_mask_statistics(Js, prev_weights, masks, n: int) -> np.ndarray:
    """PaRIS analogue of :func:`smcvar.backward.mask_statistics`.

    Every mask is advanced with the same index buffers ``Js[s - 1]``. A
    ``b_s = 1`` step keeps only the diagonal:
    ``T(k, k) = (1/M) sum_i sum_j W_j T_prev(J[k, i], j)``.
    """
    masks = np.atleast_2d(np.asarray(masks, dtype=int))
    t = len(Js)
    if masks.shape[1] != t + 1:
        raise ValueError("masks must have t + 1 entries")
    eye = np.eye(n)
    out = []
    for b in masks:
        T = eye.copy() if b[0] == 1 else 1.0 - eye
        for s in range(1, t + 1):
            J = np.asarray(Js[s - 1])
            if b[s] == 0:
                T = zero_diagonal(_pair_average(T, J))
            else:
                T = np.diag((T @ prev_weights[s - 1])[J].mean(axis=1))
        out.append(T)
    return np.array(out)


def _check(stats: ParisStats, state: FilterState):
    require_pairs(state.n)
    if stats.t != state.t:
        raise ValueError("statistics and state are at different time steps")


def paris_var_gamma(stats: ParisStats, state: FilterState, h) -> float:
    _check(stats, state)
    hv = h_values(h, state.particles)
    return var_gamma_q(state.n, state.t, state.log_gamma1, hv.mean(), hv @ stats.T0_tilde @ hv)


def paris_var_eta(stats: ParisStats, state: FilterState, h) -> float:
    _check(stats, state)
    hv = h_values(h, state.particles)
    f = hv - hv.mean()
    return var_eta_q(state.n, state.t, f @ stats.T0_tilde @ f)


def paris_var_phi(stats: ParisStats, state: FilterState, h) -> float:
    _check(stats, state)
    hv = h_values(h, state.particles)
    wf = state.norm_weights * (hv - state.norm_weights @ hv)
    return var_phi_q(state.n, state.t, wf @ stats.T0_tilde @ wf)
