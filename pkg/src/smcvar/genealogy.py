"""Genealogy-tracing variance estimators.

The Chan-Lai estimator (CLE) and its fixed-lag variant only need the Eve /
Enoch indices carried by :class:`~smcvar.core.FilterState`. Both are
evaluated in O(N) through per-class sums of the centered test function.
The online genealogy-tracing term-by-term estimator propagates two N x N
matrices with the ancestor indices in place of backward weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from smcvar.backward import tbt_gamma_q
from smcvar.core import FilterState, h_values, require_pairs


def _class_sum_variance(classes: np.ndarray, f: np.ndarray) -> float:
    n = len(f)
    if np.all(classes == classes[0]):
        # one class holds the centered total, which is exactly zero
        return 0.0
    sums = np.bincount(classes, weights=f, minlength=n)
    return float(sums @ sums) / n


def cle_variance(state: FilterState, h) -> float:
    """Chan-Lai estimate of the asymptotic variance of ``eta_t^N(h)``."""
    require_pairs(state.n)
    hv = h_values(h, state.particles)
    return _class_sum_variance(state.eve, hv - hv.mean())


def lag_variance(state: FilterState, h, lag: int) -> float:
    """Fixed-lag estimate using ancestors ``lag`` steps back.

    For ``lag >= t`` the ancestors are the Eve indices and the value equals
    :func:`cle_variance`.
    """
    require_pairs(state.n)
    if lag < 0:
        raise ValueError("lag must be nonnegative")
    if lag > state.lag_max:
        raise ValueError(f"ring capacity exceeded: lag {lag} > lag_max {state.lag_max}")
    hv = h_values(h, state.particles)
    return _class_sum_variance(state.enoch_ring[lag], hv - hv.mean())


def eve_disjointness(state: FilterState) -> float:
    """``D^GT_N(t)``: fraction of ordered pairs with distinct Eve indices."""
    n = state.n
    require_pairs(n)
    counts = np.bincount(state.eve, minlength=n).astype(float)
    return float(n * n - counts @ counts) / (n * (n - 1))


def genealogy_beta(ancestors: np.ndarray, n: int | None = None) -> np.ndarray:
    """One-hot backward matrix ``beta^GT(k, l) = 1{l = A^k}``.

    Plugging this matrix into the backward recursions gives the
    genealogy-tracing statistics.
    """
    ancestors = np.asarray(ancestors)
    n = ancestors.shape[-1] if n is None else n
    out = np.zeros(ancestors.shape + (n,))
    np.put_along_axis(out, ancestors[..., None], 1.0, axis=-1)
    return out


def gather_pairs(T: np.ndarray, anc: np.ndarray) -> np.ndarray:
    """``T[..., anc[k], anc[l]]``; the one-hot sandwich without the products."""
    rows = np.take_along_axis(T, anc[..., :, None], axis=-2)
    return np.take_along_axis(rows, anc[..., None, :], axis=-1)


def genealogy_mask_statistics(ancestors, prev_weights, masks, n: int) -> np.ndarray:
    """``T^b_t`` for the genealogy-tracing estimator, one per mask.

    Same recursion as :func:`smcvar.backward.mask_statistics` with
    ``beta^GT``, evaluated by index gathers. ``ancestors[s - 1]`` are the
    ancestor indices drawn at step ``s``, with optional leading batch axes.
    """
    masks = np.atleast_2d(np.asarray(masks, dtype=int))
    t = len(ancestors)
    if masks.shape[1] != t + 1:
        raise ValueError("masks must have t + 1 entries")
    lead = np.shape(ancestors[0])[:-1] if t else ()
    eye = np.eye(n)
    idx = np.arange(n)
    # flat positions of (anc[k], anc[l]) in the row-major N x N matrix
    pairs = [
        (np.asarray(a)[..., :, None] * n + np.asarray(a)[..., None, :]).reshape(lead + (n * n,))
        for a in ancestors
    ]
    cache: dict[tuple, np.ndarray] = {}

    def stat(prefix: tuple) -> np.ndarray:
        if prefix in cache:
            return cache[prefix]
        s = len(prefix) - 1
        if s == 0:
            out = np.broadcast_to(eye if prefix[0] == 1 else 1.0 - eye, lead + (n, n))
        else:
            prev = stat(prefix[:-1])
            anc = np.asarray(ancestors[s - 1])
            if prefix[-1] == 0:
                flat = np.broadcast_to(prev, lead + (n, n)).reshape(lead + (n * n,))
                out = np.take_along_axis(flat, pairs[s - 1], axis=-1).reshape(lead + (n, n))
                out[..., idx, idx] = 0.0
            else:
                vec = (prev @ np.asarray(prev_weights[s - 1])[..., :, None])[..., 0]
                out = np.zeros(lead + (n, n))
                out[..., idx, idx] = np.take_along_axis(vec, anc, axis=-1)
        cache[prefix] = out
        return out

    T = np.stack([stat(tuple(int(v) for v in b)) for b in masks], axis=-3)
    # the recursive closure forms a reference cycle; free the cache now
    cache.clear()
    return T


@dataclass
class GtStats:
    """``T0_gt`` is binary with zero diagonal; ``S_gt`` aggregates the e_s terms."""

    t: int
    T0_gt: np.ndarray
    S_gt: np.ndarray


def gt_init(n: int) -> GtStats:
    return GtStats(t=0, T0_gt=1.0 - np.eye(n), S_gt=np.eye(n))


def gt_tbt_update(stats: GtStats, state: FilterState) -> GtStats:
    """Advance the statistics from ``t - 1`` to ``state.t`` using its ancestors."""
    if state.ancestors is None or state.t != stats.t + 1:
        raise ValueError("state must be the successor of the statistics' time step")
    anc = state.ancestors
    n = len(anc)
    if stats.T0_gt.shape != (n, n):
        raise ValueError("dimension mismatch")
    diag = stats.T0_gt[anc] @ state.resample_weights
    T0 = stats.T0_gt[np.ix_(anc, anc)]
    S = stats.S_gt[np.ix_(anc, anc)]
    idx = np.arange(n)
    T0[idx, idx] = 0.0
    S[idx, idx] = diag
    return GtStats(t=state.t, T0_gt=T0, S_gt=S)


def gt_tbt_variance(stats: GtStats, state: FilterState, h) -> float:
    """Genealogy-tracing term-by-term estimate of ``sigma^2_{gamma,t}(h)``."""
    n = state.n
    require_pairs(n)
    if stats.t != state.t:
        raise ValueError("statistics and state are at different time steps")
    hv = h_values(h, state.particles)
    q_s = hv @ stats.S_gt @ hv
    q_0 = hv @ stats.T0_gt @ hv
    return tbt_gamma_q(n, state.t, state.log_gamma1, q_s, q_0)


def gt_tbt_var_eta(stats: GtStats, state: FilterState, h) -> float:
    """Genealogy-tracing term-by-term estimate for the predictor."""
    n = state.n
    require_pairs(n)
    hv = h_values(h, state.particles)
    f = hv - hv.mean()
    return tbt_gamma_q(n, state.t, 0.0, f @ stats.S_gt @ f, f @ stats.T0_gt @ f)
