"""Ground truth for the estimators.

Finite state spaces admit exact Feynman-Kac quantities: marginals, the
asymptotic variances and the bivariate measures ``mu_{b,t}``, all through
small matrix recursions. For other models the asymptotic variance is
estimated by brute-force replication: ``N`` times the sample variance of
independent particle estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from smcvar.core import Model, run_filter_batch
from smcvar.rng import as_generator, categorical_rows


class DiscreteHmm(Model):
    """Finite-state model with the potentials supplied per step.

    Args:
        init: initial law on ``K`` states.
        trans: ``K x K`` row-stochastic transition matrix, used at every step.
        potentials: array ``(T + 1, K)``; row ``t`` is ``g_t``.
    """

    def __init__(self, init, trans, potentials):
        self.init = np.asarray(init, dtype=float)
        self.trans = np.asarray(trans, dtype=float)
        self.potentials = np.atleast_2d(np.asarray(potentials, dtype=float))
        k = len(self.init)
        if self.trans.shape != (k, k) or self.potentials.shape[1] != k:
            raise ValueError("inconsistent shapes")
        if not np.allclose(self.init.sum(), 1.0) or not np.allclose(self.trans.sum(axis=1), 1.0):
            raise ValueError("init and rows of trans must sum to 1")
        if np.any(self.init < 0) or np.any(self.trans < 0):
            raise ValueError("probabilities must be nonnegative")
        if np.any(self.potentials <= 0) or not np.all(np.isfinite(self.potentials)):
            raise ValueError("potentials must be positive and finite")
        self.potential_bound = float(self.potentials.max())

    @property
    def n_states(self) -> int:
        return len(self.init)

    @property
    def horizon(self) -> int:
        return self.potentials.shape[0] - 1

    @classmethod
    def random(cls, rng, n_states: int = 2, horizon: int = 3, g_range=(0.2, 2.0)):
        gen = as_generator(rng)
        init = gen.dirichlet(np.ones(n_states))
        trans = gen.dirichlet(np.ones(n_states), size=n_states)
        pots = gen.uniform(*g_range, size=(horizon + 1, n_states))
        return cls(init, trans, pots)

    def g(self, t: int) -> np.ndarray:
        if not 0 <= t <= self.horizon:
            raise ValueError(f"no potential for step {t}")
        return self.potentials[t]

    def init_sample(self, rng, n):
        return categorical_rows(rng, self.init, n)

    def init_logdensity(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.init[x])

    def trans_sample(self, rng, x, t):
        x = np.asarray(x)
        return categorical_rows(rng, self.trans[x.ravel()], 1).reshape(x.shape)

    def trans_density(self, x_prev, x_next, t):
        return self.trans[x_prev, x_next]

    def potential(self, x, t):
        return self.g(t)[x]


# ---------------------------------------------------------------------------
# exact marginals


def gamma_measures(hmm: DiscreteHmm, t: int) -> list[np.ndarray]:
    """Unnormalized predictive measures ``gamma_0, ..., gamma_t`` as K-vectors."""
    out = [hmm.init.copy()]
    for s in range(1, t + 1):
        out.append((out[-1] * hmm.g(s - 1)) @ hmm.trans)
    return out


def _hv(hmm, h):
    return np.broadcast_to(np.asarray(h, dtype=float), (hmm.n_states,))


def exact_gamma(hmm: DiscreteHmm, t: int, h=1.0) -> float:
    return float(gamma_measures(hmm, t)[-1] @ _hv(hmm, h))


def exact_eta(hmm: DiscreteHmm, t: int, h) -> float:
    gam = gamma_measures(hmm, t)[-1]
    return float(gam @ _hv(hmm, h) / gam.sum())


def exact_phi(hmm: DiscreteHmm, t: int, h) -> float:
    gg = gamma_measures(hmm, t)[-1] * hmm.g(t)
    return float(gg @ _hv(hmm, h) / gg.sum())


def backward_functions(hmm: DiscreteHmm, t: int, h) -> list[np.ndarray]:
    """``Qbar_{s+1:t}[h]`` for ``s = 0, ..., t``.

    ``Qbar_{s+1:t}[h](x) = E[prod_{u=s}^{t-1} g_u(X_u) h(X_t) | X_s = x]``.
    """
    v = [None] * (t + 1)
    v[t] = _hv(hmm, h).astype(float)
    for s in range(t - 1, -1, -1):
        v[s] = hmm.g(s) * (hmm.trans @ v[s + 1])
    return v


def _gamma_sum(hmm: DiscreteHmm, t: int, h) -> float:
    gam = gamma_measures(hmm, t)
    v = backward_functions(hmm, t, h)
    gt_h = gam[t] @ v[t]
    return float(sum(gam[s].sum() * (gam[s] @ v[s] ** 2) - gt_h**2 for s in range(t + 1)))


def exact_asym_var(hmm: DiscreteHmm, t: int, h, target: str = "eta") -> float:
    """Exact asymptotic variance of the particle estimate of ``target`` at ``t``.

    ``target`` is ``"gamma"`` (unnormalized), ``"eta"`` (predictor) or
    ``"phi"`` (filter).
    """
    hv = _hv(hmm, h)
    if target == "gamma":
        return _gamma_sum(hmm, t, hv)
    if target == "eta":
        g1 = exact_gamma(hmm, t)
        return _gamma_sum(hmm, t, hv - exact_eta(hmm, t, hv)) / g1**2
    if target == "phi":
        gt = hmm.g(t)
        f = gt * (hv - exact_phi(hmm, t, hv))
        return _gamma_sum(hmm, t, f) / exact_gamma(hmm, t, gt) ** 2
    raise ValueError(f"unknown target {target!r}")


def exact_mu(hmm: DiscreteHmm, mask, h, f=None) -> float:
    """``mu_{b,t}(h x f)`` through the bivariate chain on ``K x K`` states.

    ``b_s = 1`` forces the second coordinate to copy the first at time ``s``.
    """
    mask = np.asarray(mask, dtype=int)
    hv = _hv(hmm, h)
    fv = hv if f is None else _hv(hmm, f)
    mu = np.diag(hmm.init) if mask[0] == 1 else np.outer(hmm.init, hmm.init)
    P = hmm.trans
    for s in range(1, len(mask)):
        g = hmm.g(s - 1)
        mu = mu * np.outer(g, g)
        if mask[s] == 0:
            mu = P.T @ mu @ P
        else:
            mu = np.diag(mu.sum(axis=1) @ P)
    return float(hv @ mu @ fv)


# ---------------------------------------------------------------------------
# replication


@dataclass
class ReplicationResult:
    """Per-time ``N * sample variance`` and its jackknife standard error."""

    estimate: np.ndarray
    stderr: np.ndarray
    means: np.ndarray


def jackknife_variance(x: np.ndarray, axis: int = 0):
    """Sample variance along ``axis`` and its jackknife standard error."""
    x = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    r = x.shape[0]
    if r < 2:
        raise ValueError("need at least two replicates")
    c = x - x.mean(axis=0)
    var = (c**2).sum(axis=0) / (r - 1)
    if r < 3:
        return var, np.full_like(var, np.nan)
    s1 = c.sum(axis=0)
    s2 = (c**2).sum(axis=0)
    loo_mean = (s1 - c) / (r - 1)
    loo_var = (s2 - c**2 - (r - 1) * loo_mean**2) / (r - 2)
    se = np.sqrt((r - 1) / r * ((loo_var - loo_var.mean(axis=0)) ** 2).sum(axis=0))
    return var, se


def _eval(h, x):
    return np.asarray(h(x) if callable(h) else np.asarray(h)[x], dtype=float)


def _estimates(kind, w, hv, log_g1):
    if kind == "eta":
        return hv.mean(axis=-1)
    if kind == "phi":
        return (w * hv).sum(axis=-1) / w.sum(axis=-1)
    if kind == "gamma":
        return np.exp(log_g1) * hv.mean(axis=-1)
    raise ValueError(f"unknown target {kind!r}")


def replicate_estimates(model: Model, T: int, h, n: int, r: int, rng, target: str = "eta") -> np.ndarray:
    """Particle estimates of ``target`` at ``t = 0..T`` from ``r`` independent filters.

    All replicates run as one batched filter. Returns ``(T+1, r)``.
    """
    out = np.empty((T + 1, r))
    for state in run_filter_batch(model, n, T, r, rng):
        out[state.t] = _estimates(target, state.weights, _eval(h, state.particles), state.log_gamma1)
    return out


def replicate_counts(hmm: DiscreteHmm, T: int, h, n: int, r: int, rng, target: str = "eta") -> np.ndarray:
    """Same law as :func:`replicate_estimates` for a finite model, via state counts.

    Under multinomial resampling the estimates of ``eta``, ``phi`` and
    ``gamma`` only depend on how many particles sit in each state, and the
    counts evolve as a Markov chain. Each step costs O(r K^2) regardless of
    ``n``.
    """
    gen = as_generator(rng)
    hv = _hv(hmm, h)
    k = hmm.n_states
    counts = gen.multinomial(n, hmm.init, size=r)
    log_g1 = np.zeros(r)
    out = np.empty((T + 1, r))
    prev_g = None
    for t in range(T + 1):
        if t > 0:
            p = counts * prev_g
            p = p / p.sum(axis=1, keepdims=True)
            parents = gen.multinomial(n, p)
            counts = np.zeros((r, k), dtype=np.int64)
            for c in range(k):
                counts += gen.multinomial(parents[:, c], hmm.trans[c])
        g = hmm.g(t)
        w = counts * g
        if target == "eta":
            out[t] = counts @ hv / n
        elif target == "phi":
            out[t] = w @ hv / w.sum(axis=1)
        elif target == "gamma":
            out[t] = np.exp(log_g1) * (counts @ hv) / n
        else:
            raise ValueError(f"unknown target {target!r}")
        log_g1 += np.log(w.sum(axis=1) / n)
        prev_g = g
    return out


def replication_variance(model: Model, T: int, h, n: int, r: int, rng, target: str = "eta", chunk: int | None = None):
    """``N`` times the across-replicate variance of the particle estimates.

    Returns a :class:`ReplicationResult` over ``t = 0..T``. ``chunk`` bounds
    how many replicates run at once (memory is ``chunk * n`` particles).
    """
    if r < 2:
        raise ValueError("replication needs R >= 2")
    gen = as_generator(rng)
    run = replicate_counts if isinstance(model, DiscreteHmm) else replicate_estimates
    chunk = r if chunk is None else chunk
    parts = []
    done = 0
    while done < r:
        m = min(chunk, r - done)
        parts.append(run(model, T, h, n, m, gen, target))
        done += m
    est = np.concatenate(parts, axis=1)
    var, se = jackknife_variance(est, axis=1)
    return ReplicationResult(estimate=n * var, stderr=n * se, means=est.mean(axis=1))


def replicate_smoothing(model: Model, ell: int, T: int, h, n: int, r: int, rng) -> np.ndarray:
    """Forward-only FFBS estimates of ``E[h(X_ell) | y_{0:t}]`` for ``t = ell..T``.

    Returns an ``(T - ell + 1, r)`` array; its scaled variance across
    replicates is the reference for the smoothing variance estimator.
    """
    from smcvar.backward import backward_from_log

    gen = as_generator(rng)
    out = np.empty((T - ell + 1, r))
    for j in range(r):
        x = np.asarray(model.init_sample(gen, n))
        w = tstat = None
        for t in range(T + 1):
            if t > 0:
                anc = categorical_rows(gen, w, n)
                x_prev = x
                x = np.asarray(model.trans_sample(gen, x[anc], t))
                if t > ell:
                    beta = backward_from_log(model.trans_logdensity_matrix(x_prev, x, t), np.log(w))
                    tstat = beta @ tstat
            w = np.asarray(model.potential(x, t), dtype=float)
            if t == ell:
                tstat = _eval(h, x)
            if t >= ell:
                out[t - ell, j] = w @ tstat / w.sum()
    return out


def replication_smoothing_variance(model: Model, ell: int, T: int, h, n: int, r: int, rng) -> ReplicationResult:
    if r < 2:
        raise ValueError("replication needs R >= 2")
    est = replicate_smoothing(model, ell, T, h, n, r, rng)
    var, se = jackknife_variance(est, axis=1)
    return ReplicationResult(estimate=n * var, stderr=n * se, means=est.mean(axis=1))


def exact_smoothing(hmm: DiscreteHmm, ell: int, t: int, h) -> float:
    """``E[h(X_ell) | y_{0:t}]`` under the filter weighting at ``t``."""
    gam = gamma_measures(hmm, t)
    v = backward_functions(hmm, t, hmm.g(t))
    num = gam[ell] * _hv(hmm, h) @ v[ell]
    return float(num / (gam[ell] @ v[ell]))


__all__ = [
    "DiscreteHmm",
    "ReplicationResult",
    "backward_functions",
    "exact_asym_var",
    "exact_eta",
    "exact_gamma",
    "exact_mu",
    "exact_phi",
    "exact_smoothing",
    "gamma_measures",
    "jackknife_variance",
    "replicate_counts",
    "replicate_estimates",
    "replicate_smoothing",
    "replication_smoothing_variance",
    "replication_variance",
]
