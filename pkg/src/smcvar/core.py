"""Bootstrap particle filter with genealogy bookkeeping.

Conventions used throughout the package:

* ``trans_sample(rng, x, t)`` draws from the kernel ``M_t``, moving particles
  from time ``t - 1`` to time ``t``.
* ``potential(x, t)`` is ``g_t``; the particle weights at time ``t`` are
  ``g_t`` evaluated at the time-``t`` particles.
* The running normalizing constant ``gamma_t^N(1) = prod_{s<t} Omega_s / N``
  is only ever stored as a log.
* Particle indices are 0-based.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from smcvar.rng import as_generator, categorical_rows


class Model:
    """Feynman-Kac model: initial law, Markov kernels and potentials.

    Subclasses implement the vectorized sampling, density and potential
    methods. States are scalars (``state_dim == 1``) stored in 1-D arrays, or
    vectors stored in ``(N, state_dim)`` arrays.
    """

    state_dim: int = 1
    #: Upper bound ``G_inf`` on every potential; ``inf`` when unknown.
    potential_bound: float = math.inf

    def init_sample(self, rng, n: int) -> np.ndarray:
        raise NotImplementedError

    def init_logdensity(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def trans_sample(self, rng, x: np.ndarray, t: int) -> np.ndarray:
        raise NotImplementedError

    def trans_density(self, x_prev: np.ndarray, x_next: np.ndarray, t: int) -> np.ndarray:
        """Transition density ``m_t(x_prev, x_next)``, broadcasting."""
        raise NotImplementedError

    def potential(self, x: np.ndarray, t: int) -> np.ndarray:
        raise NotImplementedError

    def trans_logdensity_matrix(self, x_prev: np.ndarray, x_next: np.ndarray, t: int) -> np.ndarray:
        """Matrix ``L[k, l] = log m_t(x_prev[l], x_next[k])``.

        The default broadcasts :meth:`trans_density`; models override it with
        a direct log-density when one is available.
        """
        x_prev = np.asarray(x_prev)
        x_next = np.asarray(x_next)
        if self.state_dim == 1:
            dens = self.trans_density(x_prev[..., None, :], x_next[..., :, None], t)
        else:
            dens = self.trans_density(x_prev[..., None, :, :], x_next[..., :, None, :], t)
        with np.errstate(divide="ignore"):
            return np.log(dens)


@dataclass
class FilterState:
    """Particle system at one time step.

    ``enoch_ring[lag, i]`` is the index of the ancestor of particle ``i`` at
    time ``t - lag`` (clamped to time 0 while ``t < lag``); row 0 is the
    identity. ``resample_weights`` are the normalized weights ``W_{t-1}``
    the ancestors were drawn from.
    """

    t: int
    particles: np.ndarray
    weights: np.ndarray
    norm_weights: np.ndarray
    omega_sum: float
    log_gamma1: float
    eve: np.ndarray
    enoch_ring: np.ndarray
    ancestors: np.ndarray | None = None
    resample_weights: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def lag_max(self) -> int:
        return self.enoch_ring.shape[0] - 1


def multinomial_resample(rng, norm_weights, n: int | None = None) -> np.ndarray:
    """Draw ``n`` i.i.d. ancestor indices from ``Categorical(norm_weights)``."""
    w = np.asarray(norm_weights, dtype=float)
    if w.ndim != 1 or len(w) == 0:
        raise ValueError("weights must be a nonempty vector")
    total = w.sum()
    if not np.all(np.isfinite(w)) or np.any(w < 0) or not total > 0:
        raise ValueError("degenerate weights")
    n = len(w) if n is None else n
    return categorical_rows(rng, w / total, n)


def _weigh(model: Model, particles: np.ndarray, t: int) -> np.ndarray:
    w = np.asarray(model.potential(particles, t), dtype=float)
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError(f"potential must be positive and finite (t={t})")
    return w


def init_filter(model: Model, n: int, rng, lag_max: int = 0) -> FilterState:
    """Draw ``n`` particles from the initial law and weigh them."""
    if n < 1:
        raise ValueError("need at least one particle")
    if lag_max < 0:
        raise ValueError("lag_max must be nonnegative")
    particles = np.asarray(model.init_sample(as_generator(rng), n))
    w = _weigh(model, particles, 0)
    omega = float(w.sum())
    ident = np.arange(n)
    return FilterState(
        t=0,
        particles=particles,
        weights=w,
        norm_weights=w / omega,
        omega_sum=omega,
        log_gamma1=0.0,
        eve=ident.copy(),
        enoch_ring=np.tile(ident, (lag_max + 1, 1)),
    )


def filter_step(state: FilterState, model: Model, rng) -> FilterState:
    """Resample, propagate and reweigh: time ``t`` to ``t + 1``."""
    gen = as_generator(rng)
    n = state.n
    anc = multinomial_resample(gen, state.norm_weights, n)
    t = state.t + 1
    particles = np.asarray(model.trans_sample(gen, state.particles[anc], t))
    w = _weigh(model, particles, t)
    omega = float(w.sum())
    ring = np.empty_like(state.enoch_ring)
    ring[0] = np.arange(n)
    ring[1:] = state.enoch_ring[:-1, anc]
    return FilterState(
        t=t,
        particles=particles,
        weights=w,
        norm_weights=w / omega,
        omega_sum=omega,
        log_gamma1=state.log_gamma1 + math.log(state.omega_sum / n),
        eve=state.eve[anc],
        enoch_ring=ring,
        ancestors=anc,
        resample_weights=state.norm_weights,
    )


def run_filter(model: Model, n: int, T: int, rng, lag_max: int = 0):
    """Yield the filter states at times ``0, ..., T``."""
    gen = as_generator(rng)
    state = init_filter(model, n, gen, lag_max)
    yield state
    for _ in range(T):
        state = filter_step(state, model, gen)
        yield state


@dataclass
class BatchState:
    """``r`` independent particle systems advanced in lockstep.

    Arrays carry a leading replicate axis: ``particles`` and the weights are
    ``(r, N)``, ``log_gamma1`` is ``(r,)``.
    """

    t: int
    particles: np.ndarray
    weights: np.ndarray
    norm_weights: np.ndarray
    log_gamma1: np.ndarray
    ancestors: np.ndarray | None = None
    resample_weights: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.weights.shape[-1]


def run_filter_batch(model: Model, n: int, T: int, r: int, rng):
    """Yield batched filter states at times ``0, ..., T``.

    Scalar-state models only; their methods must act elementwise on
    ``(r, N)`` arrays.
    """
    if model.state_dim != 1:
        raise ValueError("batched filtering supports scalar states only")
    gen = as_generator(rng)
    x = np.asarray(model.init_sample(gen, r * n)).reshape(r, n)
    log_g1 = np.zeros(r)
    anc = prev_w = None
    for t in range(T + 1):
        if t > 0:
            anc = categorical_rows(gen, prev_w, n)
            x = np.asarray(model.trans_sample(gen, np.take_along_axis(x, anc, axis=1), t))
        w = _weigh(model, x, t)
        total = w.sum(axis=1)
        yield BatchState(t, x, w, w / total[:, None], log_g1.copy(), anc, prev_w)
        log_g1 = log_g1 + np.log(total / n)
        prev_w = w / total[:, None]


def h_values(h, particles) -> np.ndarray:
    """Evaluate a test function given as a callable or as precomputed values."""
    if callable(h):
        return np.asarray(h(particles), dtype=float)
    vals = np.asarray(h, dtype=float)
    if vals.ndim == 0:
        return np.full(len(particles), float(vals))
    return vals


def predictor_estimate(state: FilterState, h) -> float:
    """``eta_t^N(h)``: plain particle average."""
    return float(np.mean(h_values(h, state.particles)))


def filter_estimate(state: FilterState, h) -> float:
    """``phi_t^N(h)``: weighted particle average."""
    return float(state.norm_weights @ h_values(h, state.particles))


def gamma_estimate(state: FilterState, h) -> float:
    """Unnormalized estimate ``gamma_t^N(h)``."""
    return math.exp(state.log_gamma1) * predictor_estimate(state, h)


def require_pairs(n: int) -> None:
    if n < 2:
        raise ValueError("variance estimators require N >= 2")


# ---------------------------------------------------------------------------
# snapshots


def state_to_dict(state: FilterState) -> dict:
    def arr(a):
        return None if a is None else np.asarray(a).tolist()

    return {
        "format": "smcvar.FilterState/1",
        "t": state.t,
        "particles": arr(state.particles),
        "weights": arr(state.weights),
        "omega_sum": state.omega_sum,
        "log_gamma1": state.log_gamma1,
        "eve": arr(state.eve),
        "enoch_ring": arr(state.enoch_ring),
        "ancestors": arr(state.ancestors),
        "resample_weights": arr(state.resample_weights),
    }


def state_from_dict(d: dict) -> FilterState:
    if d.get("format") != "smcvar.FilterState/1":
        raise ValueError("not a FilterState snapshot")

    def arr(key, dtype=float):
        v = d.get(key)
        return None if v is None else np.asarray(v, dtype=dtype)

    w = arr("weights")
    return FilterState(
        t=int(d["t"]),
        particles=np.asarray(d["particles"]),
        weights=w,
        norm_weights=w / w.sum(),
        omega_sum=float(d["omega_sum"]),
        log_gamma1=float(d["log_gamma1"]),
        eve=arr("eve", int),
        enoch_ring=arr("enoch_ring", int),
        ancestors=arr("ancestors", int),
        resample_weights=arr("resample_weights"),
    )


def save_state(state: FilterState, path) -> None:
    # repr-exact floats: json writes shortest round-trip representations
    Path(path).write_text(json.dumps(state_to_dict(state)))


def load_state(path) -> FilterState:
    return state_from_dict(json.loads(Path(path).read_text()))


__all__ = [
    "Model",
    "FilterState",
    "multinomial_resample",
    "init_filter",
    "filter_step",
    "run_filter",
    "BatchState",
    "run_filter_batch",
    "h_values",
    "predictor_estimate",
    "filter_estimate",
    "gamma_estimate",
    "save_state",
    "load_state",
    "state_to_dict",
    "state_from_dict",
]
