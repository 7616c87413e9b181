"""Concrete state-space models.

Every method is vectorized over arbitrary particle arrays, so the same model
object drives a single filter or a batch of replicated filters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from smcvar.core import Model
from smcvar.rng import as_generator

_LOG_2PI = math.log(2.0 * math.pi)


def _gaussian_log_matrix(x_prev, x_next, coef, scale):
    """``log N(x_next[k]; coef * x_prev[l], scale^2)`` at ``[..., k, l]``, built in place."""
    z = np.asarray(x_next, dtype=float)[..., :, None] - coef * np.asarray(x_prev, dtype=float)[..., None, :]
    z *= z
    z *= -0.5 / (scale * scale)
    z -= math.log(scale) + 0.5 * _LOG_2PI
    return z


class StochasticVolatility(Model):
    """``X_t = phi X_{t-1} + sigma U_t``, ``Y_t | X_t ~ N(0, beta^2 exp(X_t))``.

    ``X_0`` is drawn from the stationary law ``N(0, sigma^2 / (1 - phi^2))``.
    """

    def __init__(self, observations, phi: float = 0.975, beta: float = 0.641, sigma: float = 0.165):
        if abs(phi) >= 1:
            raise ValueError("|phi| must be < 1")
        if beta <= 0 or sigma <= 0:
            raise ValueError("beta and sigma must be positive")
        self.phi = float(phi)
        self.beta = float(beta)
        self.sigma = float(sigma)
        self.y = np.asarray(observations, dtype=float)
        ay = np.abs(self.y)
        with np.errstate(divide="ignore"):
            # density at the mode exp(x) = y^2 / beta^2
            self.potential_bounds = 1.0 / (ay * math.sqrt(2.0 * math.pi * math.e))
        self.potential_bound = float(self.potential_bounds.max()) if len(self.y) else math.inf

    @property
    def stationary_var(self) -> float:
        return self.sigma**2 / (1.0 - self.phi**2)

    def init_sample(self, rng, n):
        return as_generator(rng).normal(0.0, math.sqrt(self.stationary_var), size=n)

    def init_logdensity(self, x):
        v = self.stationary_var
        return -0.5 * (_LOG_2PI + math.log(v) + np.square(x) / v)

    def trans_sample(self, rng, x, t):
        x = np.asarray(x)
        return self.phi * x + self.sigma * as_generator(rng).standard_normal(x.shape)

    def trans_density(self, x_prev, x_next, t):
        z = (np.asarray(x_next) - self.phi * np.asarray(x_prev)) / self.sigma
        return np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2.0 * math.pi))

    def trans_logdensity_matrix(self, x_prev, x_next, t):
        return _gaussian_log_matrix(x_prev, x_next, self.phi, self.sigma)

    def log_potential(self, x, t):
        x = np.asarray(x)
        yt = self.y[t]
        return -0.5 * (_LOG_2PI + 2.0 * math.log(self.beta) + x) - 0.5 * yt * yt * np.exp(-x) / self.beta**2

    def potential(self, x, t):
        return np.exp(self.log_potential(x, t))


def sv_simulate(T: int, rng, phi: float = 0.975, beta: float = 0.641, sigma: float = 0.165):
    """Simulate ``T`` steps (times ``0..T-1``) of the volatility model.

    Returns ``(states, observations)``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if abs(phi) >= 1:
        raise ValueError("|phi| must be < 1")
    gen = as_generator(rng)
    x = np.empty(T)
    x[0] = gen.normal(0.0, sigma / math.sqrt(1.0 - phi**2))
    noise = gen.standard_normal(T)
    for t in range(1, T):
        x[t] = phi * x[t - 1] + sigma * noise[t]
    y = beta * np.exp(0.5 * x) * gen.standard_normal(T)
    return x, y


class LinearGaussianModel(Model):
    """``X_t = a X_{t-1} + sigma_x U_t``, ``Y_t = c X_t + sigma_y V_t``, ``X_0 ~ N(m0, v0)``."""

    def __init__(self, observations, a=0.9, c=1.0, sigma_x=1.0, sigma_y=1.0, m0=0.0, v0=1.0):
        if sigma_x < 0 or sigma_y <= 0 or v0 < 0:
            raise ValueError("noise scales must be nonnegative and sigma_y positive")
        self.a, self.c = float(a), float(c)
        self.sigma_x, self.sigma_y = float(sigma_x), float(sigma_y)
        self.m0, self.v0 = float(m0), float(v0)
        self.y = np.asarray(observations, dtype=float)
        self.potential_bound = 1.0 / (self.sigma_y * math.sqrt(2.0 * math.pi))

    def init_sample(self, rng, n):
        return self.m0 + math.sqrt(self.v0) * as_generator(rng).standard_normal(n)

    def init_logdensity(self, x):
        return -0.5 * (_LOG_2PI + math.log(self.v0) + np.square(np.asarray(x) - self.m0) / self.v0)

    def trans_sample(self, rng, x, t):
        x = np.asarray(x)
        return self.a * x + self.sigma_x * as_generator(rng).standard_normal(x.shape)

    def trans_density(self, x_prev, x_next, t):
        z = (np.asarray(x_next) - self.a * np.asarray(x_prev)) / self.sigma_x
        return np.exp(-0.5 * z * z) / (self.sigma_x * math.sqrt(2.0 * math.pi))

    def trans_logdensity_matrix(self, x_prev, x_next, t):
        return _gaussian_log_matrix(x_prev, x_next, self.a, self.sigma_x)

    def potential(self, x, t):
        z = (self.y[t] - self.c * np.asarray(x)) / self.sigma_y
        return np.exp(-0.5 * z * z) * self.potential_bound


@dataclass
class KalmanResult:
    """Predictive (``X_t | y_{0:t-1}``) and filtering (``X_t | y_{0:t}``) moments."""

    pred_means: np.ndarray
    pred_vars: np.ndarray
    filt_means: np.ndarray
    filt_vars: np.ndarray
    log_likelihood: float


def kalman_filter(model: LinearGaussianModel, observations=None) -> KalmanResult:
    y = model.y if observations is None else np.asarray(observations, dtype=float)
    T = len(y)
    pm, pv, fm, fv = (np.empty(T) for _ in range(4))
    m, v = model.m0, model.v0
    loglik = 0.0
    for t in range(T):
        if t > 0:
            m = model.a * m
            v = model.a**2 * v + model.sigma_x**2
        if v < 0:
            raise ValueError("variance is not positive semidefinite")
        pm[t], pv[t] = m, v
        s = model.c**2 * v + model.sigma_y**2
        if s <= 0:
            raise ValueError("innovation variance is not positive")
        k = v * model.c / s
        resid = y[t] - model.c * m
        loglik += -0.5 * (_LOG_2PI + math.log(s) + resid**2 / s)
        m = m + k * resid
        v = (1.0 - k * model.c) * v
        fm[t], fv[t] = m, v
    return KalmanResult(pm, pv, fm, fv, loglik)


# ---------------------------------------------------------------------------
# observation records


def load_observations(path) -> np.ndarray:
    """Read one float per line, or the ``y`` column of a CSV file with a header."""
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        return np.empty(0)
    try:
        return np.array([float(ln) for ln in lines])
    except ValueError:
        pass
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or "y" not in reader.fieldnames:
        raise ValueError("observation file must hold one float per line or a CSV column 'y'")
    return np.array([float(row["y"]) for row in reader])


def save_observations(path, y) -> None:
    # repr round-trips doubles exactly
    Path(path).write_text("".join(f"{float(v)!r}\n" for v in np.asarray(y)))
