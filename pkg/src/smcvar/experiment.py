"""Experiment harness: replicated filter runs with online variance estimators.

A run is described by an :class:`ExperimentConfig`. Each replicate gets its
own random stream ``RngStream(seed, rep)`` so results do not depend on how
replicates are scheduled across workers.

Per-step rows have the fixed column order :data:`CSV_COLUMNS`. Wall-clock
timings go to a separate file so the main output is reproducible byte for
byte.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from smcvar import backward, genealogy, paris, smoothing
from smcvar.core import filter_step, init_filter
from smcvar.models import LinearGaussianModel, StochasticVolatility, load_observations, sv_simulate
from smcvar.rng import RngStream

CSV_COLUMNS = ("replicate", "t", "estimator", "estimate", "d_bs", "d_gt")
TIMING_COLUMNS = ("replicate", "t", "seconds")

TEST_FUNCTIONS = {
    "id": lambda x: np.asarray(x, dtype=float),
    "square": lambda x: np.square(np.asarray(x, dtype=float)),
}

# streams reserved for observation simulation, far from replicate indices
_OBS_STREAM = 2**62


@dataclass
class ExperimentConfig:
    model: str = "sv"
    n: int = 1000
    T: int = 100
    estimators: list[str] = field(default_factory=lambda: ["cle", "bs"])
    replicates: int = 1
    seed: int = 0
    target: str = "eta"
    h: str = "id"
    phi: float = 0.975
    beta: float = 0.641
    sigma: float = 0.165
    ar: float = 0.9
    obs_noise: float = 1.0
    observations: str | None = None
    obs_seed: int | None = None
    workers: int = 1
    output: str | None = None
    summary: str | None = None
    oracle_n: int = 4000
    oracle_r: int = 500
    ell: int | None = None


_INT_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig) if f.type in ("int", "int | None")}
_FLOAT_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig) if f.type == "float"}


def coerce(key: str, value):
    """Turn a config-file string into the type of field ``key``."""
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    if key not in names:
        raise ValueError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return value
    value = value.strip()
    if key == "estimators":
        return [v.strip() for v in value.split(",") if v.strip()]
    if value.lower() in ("", "none"):
        return None
    if key in _INT_FIELDS:
        return int(value)
    if key in _FLOAT_FIELDS:
        return float(value)
    return value


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def load_config(path=None, **overrides) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: coerce(k, v) for k, v in overrides.items() if v is not None})
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


# ---------------------------------------------------------------------------
# estimator keys


@dataclass(frozen=True)
class EstimatorKey:
    kind: str
    param: int | None = None

    @property
    def name(self) -> str:
        return self.kind if self.param is None else f"{self.kind}:{self.param}"


_PARAM_KINDS = {"lag", "paris", "smoothing"}
_PLAIN_KINDS = {"cle", "bs", "bs_tbt", "gt_tbt"}


def parse_estimator(key: str) -> EstimatorKey:
    kind, _, param = key.partition(":")
    if kind in _PLAIN_KINDS and not param:
        return EstimatorKey(kind)
    if kind in _PARAM_KINDS and param:
        try:
            value = int(param)
        except ValueError:
            raise ValueError(f"bad parameter in estimator key {key!r}") from None
        if value < 0:
            raise ValueError(f"bad parameter in estimator key {key!r}")
        return EstimatorKey(kind, value)
    raise ValueError(f"unknown estimator key {key!r}")


def validate(cfg: ExperimentConfig) -> list[EstimatorKey]:
    if cfg.n < 2:
        raise ValueError("N must be >= 2")
    if cfg.T < 0:
        raise ValueError("T must be >= 0")
    if cfg.replicates < 1:
        raise ValueError("need at least one replicate")
    if cfg.model not in ("sv", "linear-gaussian"):
        raise ValueError(f"unknown model {cfg.model!r}")
    if cfg.h not in TEST_FUNCTIONS:
        raise ValueError(f"unknown test function {cfg.h!r}")
    if cfg.target not in ("eta", "gamma", "phi"):
        raise ValueError(f"unknown target {cfg.target!r}")
    keys = [parse_estimator(k) for k in cfg.estimators]
    for k in keys:
        if k.kind == "paris" and k.param <= 1:
            raise ValueError("PaRIS requires M > 1")
        if k.kind in ("cle", "lag", "smoothing") and cfg.target != "eta":
            raise ValueError(f"{k.name} only estimates the predictor variance (target=eta)")
        if k.kind in ("bs_tbt", "gt_tbt") and cfg.target == "phi":
            raise ValueError(f"{k.name} has no filter (phi) variant")
    return keys


# ---------------------------------------------------------------------------
# models


def build_model(cfg: ExperimentConfig):
    n_obs = cfg.T + 1
    if cfg.observations:
        y = load_observations(cfg.observations)
        if len(y) < n_obs:
            raise ValueError(f"observation file has {len(y)} values, need {n_obs}")
        y = y[:n_obs]
    else:
        obs_rng = RngStream(cfg.seed if cfg.obs_seed is None else cfg.obs_seed, _OBS_STREAM)
        if cfg.model == "sv":
            _, y = sv_simulate(n_obs, obs_rng, cfg.phi, cfg.beta, cfg.sigma)
        else:
            lg = LinearGaussianModel(np.zeros(n_obs), a=cfg.ar, sigma_y=cfg.obs_noise)
            x = lg.init_sample(obs_rng, 1)[0]
            y = np.empty(n_obs)
            for t in range(n_obs):
                if t:
                    x = lg.trans_sample(obs_rng, np.array(x), t)
                y[t] = float(x) + cfg.obs_noise * obs_rng.standard_normal()
    if cfg.model == "sv":
        return StochasticVolatility(y, cfg.phi, cfg.beta, cfg.sigma)
    return LinearGaussianModel(y, a=cfg.ar, sigma_y=cfg.obs_noise)


# ---------------------------------------------------------------------------
# one replicate


def _disjoint(stats_T0, state, h, target, kind):
    if kind == "bs":
        fns = {"eta": backward.bs_var_eta, "gamma": backward.bs_var_gamma, "phi": backward.bs_var_phi}
    else:
        fns = {"eta": paris.paris_var_eta, "gamma": paris.paris_var_gamma, "phi": paris.paris_var_phi}
    return fns[target](stats_T0, state, h)


def run_replicate(cfg: ExperimentConfig, rep: int, model=None):
    """Run one replicate and return ``(rows, timings)``.

    ``rows`` follow :data:`CSV_COLUMNS`; ``timings`` follow
    :data:`TIMING_COLUMNS`.
    """
    keys = validate(cfg)
    model = build_model(cfg) if model is None else model
    h = TEST_FUNCTIONS[cfg.h]
    rng = RngStream(cfg.seed, rep)
    kinds = {k.kind for k in keys}
    lags = [k.param for k in keys if k.kind == "lag"]
    ells = sorted({k.param for k in keys if k.kind == "smoothing"})
    need_s = bool(kinds & {"bs_tbt", "smoothing"})
    need_bs = need_s or "bs" in kinds
    need_beta = need_bs or "paris" in kinds
    # PaRIS draws come from their own streams so adding or removing an
    # estimator never changes the particle system
    paris_rngs = {k.param: rng.spawn(2**40 + rep * 64 + i) for i, k in enumerate(keys) if k.kind == "paris"}

    n = cfg.n
    state = init_filter(model, n, rng, lag_max=max(lags, default=0))
    bs = backward.bs_init(n, track_s=need_s) if need_bs else None
    gt = genealogy.gt_init(n) if "gt_tbt" in kinds else None
    pstats = {m: paris.paris_init(n, m) for m in paris_rngs}
    sm = {ell: smoothing.smoothing_init(ell) for ell in ells}

    rows, timings = [], []
    for t in range(cfg.T + 1):
        tic = time.perf_counter()
        if t > 0:
            prev = state
            state = filter_step(prev, model, rng)
            beta = backward.backward_matrix(prev, state.particles, model) if need_beta else None
            if bs is not None:
                bs = backward.bs_update(bs, beta, prev.norm_weights)
            if gt is not None:
                gt = genealogy.gt_tbt_update(gt, state)
            for m in pstats:
                pstats[m] = paris.paris_step(pstats[m], beta, paris_rngs[m])
        else:
            beta = None
        for ell in ells:
            sm[ell] = smoothing.smoothing_update(sm[ell], beta, h, state, bs)

        d_bs = backward.disjointness(bs.T0) if bs is not None else math.nan
        d_gt = genealogy.eve_disjointness(state)
        for k in keys:
            if k.kind == "cle":
                est = genealogy.cle_variance(state, h)
            elif k.kind == "lag":
                est = genealogy.lag_variance(state, h, k.param)
            elif k.kind == "bs":
                est = _disjoint(bs, state, h, cfg.target, "bs")
            elif k.kind == "paris":
                est = _disjoint(pstats[k.param], state, h, cfg.target, "paris")
            elif k.kind == "bs_tbt":
                fn = backward.bs_tbt_variance if cfg.target == "gamma" else backward.bs_tbt_var_eta
                est = fn(bs, state, h)
            elif k.kind == "gt_tbt":
                fn = genealogy.gt_tbt_variance if cfg.target == "gamma" else genealogy.gt_tbt_var_eta
                est = fn(gt, state, h)
            else:
                if t < k.param:
                    continue
                est = smoothing.smoothing_variance(sm[k.param], state, bs)
            rows.append((rep, t, k.name, float(est), float(d_bs), float(d_gt)))
        timings.append((rep, t, time.perf_counter() - tic))
    return rows, timings


def _worker(args):
    cfg, rep = args
    return run_replicate(cfg, rep)


def run_experiment(cfg: ExperimentConfig):
    """All replicates, merged in ``(replicate, t)`` order."""
    validate(cfg)
    jobs = [(cfg, rep) for rep in range(cfg.replicates)]
    if cfg.workers > 1 and cfg.replicates > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_worker, jobs))
    else:
        model = build_model(cfg)
        results = [run_replicate(c, rep, model) for c, rep in jobs]
    rows = [r for res in results for r in res[0]]
    timings = [r for res in results for r in res[1]]
    return rows, timings


# ---------------------------------------------------------------------------
# output


def config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True)


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def format_csv(cfg: ExperimentConfig, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# config: {config_json(cfg)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def summarize(rows) -> dict:
    """Median and quartiles across replicates for each ``(estimator, t)``."""
    groups: dict[tuple, list] = {}
    for _, t, name, est, _, _ in rows:
        groups.setdefault((name, t), []).append(est)
    out: dict[str, list] = {}
    for (name, t), vals in sorted(groups.items()):
        q25, med, q75 = np.quantile(vals, [0.25, 0.5, 0.75])
        out.setdefault(name, []).append(
            {"t": t, "median": float(med), "q25": float(q25), "q75": float(q75), "n": len(vals)}
        )
    return out


def write_outputs(cfg: ExperimentConfig, rows, timings) -> None:
    if cfg.output:
        out = Path(cfg.output)
        out.write_text(format_csv(cfg, CSV_COLUMNS, rows))
        timing_path = out.with_name(out.stem + ".timing.csv")
        timing_path.write_text(format_csv(cfg, TIMING_COLUMNS, timings))
    if cfg.summary:
        doc = {"config": dataclasses.asdict(cfg), "estimators": summarize(rows)}
        Path(cfg.summary).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def compute_error_metric(estimate, reference):
    """Relative error ``|estimate / reference - 1|``."""
    reference = np.asarray(reference, dtype=float)
    if np.any(reference <= 0):
        raise ValueError("reference must be positive")
    out = np.abs(np.asarray(estimate, dtype=float) / reference - 1.0)
    return float(out) if out.ndim == 0 else out
