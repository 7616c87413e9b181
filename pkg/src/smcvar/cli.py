"""Command-line entry point.

Subcommands:

* ``filter-var``: replicated filter runs with online variance estimators.
* ``smoothing-var``: the same with the marginal smoothing estimator.
* ``oracle``: brute-force replication reference curve.
* ``identity-suite``: algebraic identities on random small models.

Settings come from an optional ``key = value`` config file; flags override
it.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from smcvar import backward, experiment, paris
from smcvar.core import run_filter
from smcvar.oracle import DiscreteHmm, replication_smoothing_variance, replication_variance
from smcvar.rng import RngStream

ORACLE_COLUMNS = ("t", "estimate", "stderr", "mean")
IDENTITY_COLUMNS = ("run", "t", "n", "identity_dev", "mask_sum_dev", "paris_mask_sum_dev")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--model", choices=["sv", "linear-gaussian"])
    p.add_argument("-N", "--n", type=int, help="number of particles")
    p.add_argument("-T", type=int, help="final time step")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--target", choices=["eta", "gamma", "phi"])
    p.add_argument("--h", choices=sorted(experiment.TEST_FUNCTIONS), help="test function")
    p.add_argument("--phi", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--ar", type=float, help="AR coefficient of the linear-Gaussian model")
    p.add_argument("--obs-noise", dest="obs_noise", type=float)
    p.add_argument("--observations", help="observation file (one float per line or CSV column y)")
    p.add_argument("--obs-seed", dest="obs_seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("-o", "--output", help="CSV output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smcvar", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter-var", help="online variance estimators along filter runs")
    _add_common(p)
    p.add_argument("--estimators", help="comma list of cle, lag:L, bs, bs_tbt, paris:M, gt_tbt, smoothing:L")
    p.add_argument("-M", type=int, help="shorthand: add paris:M")
    p.add_argument("--lag", type=int, help="shorthand: add lag:L")
    p.add_argument("--summary", help="JSON summary path")

    p = sub.add_parser("smoothing-var", help="marginal smoothing variance estimator")
    _add_common(p)
    p.add_argument("--ell", type=int, required=True, help="smoothing time index")
    p.add_argument("--summary", help="JSON summary path")

    p = sub.add_parser("oracle", help="replication reference for the asymptotic variance")
    _add_common(p)
    p.add_argument("--oracle-n", dest="oracle_n", type=int)
    p.add_argument("--oracle-r", dest="oracle_r", type=int)
    p.add_argument("--ell", type=int, help="reference for the smoothing estimate at this time")

    p = sub.add_parser("identity-suite", help="check the mask-sum identities on random small models")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-t", dest="max_t", type=int, default=3)
    p.add_argument("--max-n", dest="max_n", type=int, default=4)
    p.add_argument("-o", "--output")
    return parser


def _config_from_args(args) -> experiment.ExperimentConfig:
    names = {f.name for f in dataclasses.fields(experiment.ExperimentConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in names and v is not None}
    extra = []
    if getattr(args, "M", None) is not None:
        extra.append(f"paris:{args.M}")
    if getattr(args, "lag", None) is not None:
        extra.append(f"lag:{args.lag}")
    if args.command == "smoothing-var":
        overrides["estimators"] = [f"smoothing:{args.ell}"]
    if extra:
        base = overrides.get("estimators")
        if base is None:
            base = experiment.load_config(args.config).estimators
        elif isinstance(base, str):
            base = experiment.coerce("estimators", base)
        overrides["estimators"] = list(base) + extra
    return experiment.load_config(args.config, **overrides)


def _emit(text: str, path) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_filter_var(args) -> int:
    cfg = _config_from_args(args)
    rows, timings = experiment.run_experiment(cfg)
    if not cfg.output:
        sys.stdout.write(experiment.format_csv(cfg, experiment.CSV_COLUMNS, rows))
    experiment.write_outputs(cfg, rows, timings)
    return 0


def cmd_oracle(args) -> int:
    cfg = _config_from_args(args)
    model = experiment.build_model(cfg)
    h = experiment.TEST_FUNCTIONS[cfg.h]
    rng = RngStream(cfg.seed, 2**50)
    if args.ell is not None:
        res = replication_smoothing_variance(model, args.ell, cfg.T, h, cfg.oracle_n, cfg.oracle_r, rng)
        times = range(args.ell, cfg.T + 1)
    else:
        res = replication_variance(model, cfg.T, h, cfg.oracle_n, cfg.oracle_r, rng, cfg.target, chunk=50)
        times = range(cfg.T + 1)
    rows = [(t, float(e), float(s), float(m)) for t, e, s, m in zip(times, res.estimate, res.stderr, res.means)]
    _emit(experiment.format_csv(cfg, ORACLE_COLUMNS, rows), cfg.output)
    return 0


def identity_suite(runs: int, seed: int, max_t: int = 3, max_n: int = 4):
    """Rows of ``IDENTITY_COLUMNS`` over random small discrete models."""
    gen = np.random.default_rng(seed)
    rows = []
    for run in range(runs):
        t = int(gen.integers(0, max_t + 1))
        n = int(gen.integers(2, max_n + 1))
        hmm = DiscreteHmm.random(gen, n_states=int(gen.integers(2, 4)), horizon=t)
        states = list(run_filter(hmm, n, t, RngStream(seed, run)))
        betas = [backward.backward_matrix(states[s - 1], states[s].particles, hmm) for s in range(1, t + 1)]
        ws = [states[s - 1].norm_weights for s in range(1, t + 1)]
        h_vals = gen.normal(size=hmm.n_states)[states[t].particles]
        dev = backward.mask_identity_deviation(betas, ws, h_vals, states[t].log_gamma1, max_t=max_t)
        masks = backward.all_masks(t)
        msum = np.abs(backward.mask_statistics(betas, ws, masks, n=n).sum(axis=-3) - 1.0).max()
        pgen = RngStream(seed, 2**40 + run)
        Js = [paris.paris_sample_indices(b, 2, pgen) for b in betas]
        psum = np.abs(paris.paris_mask_statistics(Js, ws, masks, n).sum(axis=0) - 1.0).max()
        rows.append((run, t, n, float(dev), float(msum), float(psum)))
    return rows


def cmd_identity(args) -> int:
    rows = identity_suite(args.runs, args.seed, args.max_t, args.max_n)
    lines = [",".join(IDENTITY_COLUMNS)] + [",".join(map(str, r)) for r in rows]
    _emit("\n".join(lines) + "\n", args.output)
    worst = max((r[3] for r in rows), default=0.0)
    worst_sum = max((max(r[4], r[5]) for r in rows), default=0.0)
    ok = worst <= 1e-9 and worst_sum <= 1e-10
    print(f"identity: max deviation {worst:.3e}, mask sums {worst_sum:.3e}: {'ok' if ok else 'FAIL'}", file=sys.stderr)
    return 0 if ok else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("filter-var", "smoothing-var"):
            return cmd_filter_var(args)
        if args.command == "oracle":
            return cmd_oracle(args)
        return cmd_identity(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
