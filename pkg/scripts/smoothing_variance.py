"""Marginal smoothing variance estimate against an FFBS replication oracle.

    python3 scripts/smoothing_variance.py --n 1000 --ell 20 -T 40 --reps 50
"""

import argparse
import csv

import numpy as np

from smcvar.experiment import ExperimentConfig, build_model, run_replicate
from smcvar.oracle import replication_smoothing_variance
from smcvar.rng import RngStream


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--ell", type=int, default=20)
    p.add_argument("-T", type=int, default=40)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--oracle-n", type=int, default=2000)
    p.add_argument("--oracle-r", type=int, default=1000)
    p.add_argument("--seed", type=int, default=8)
    p.add_argument("-o", "--output", default="smoothing_variance.csv")
    a = p.parse_args()

    cfg = ExperimentConfig(model="sv", n=a.n, T=a.T, estimators=[f"smoothing:{a.ell}"], seed=a.seed)
    model = build_model(cfg)
    est = np.empty((a.reps, a.T - a.ell + 1))
    for rep in range(a.reps):
        rows, _ = run_replicate(cfg, rep, model)
        for _, t, _, v, _, _ in rows:
            est[rep, t - a.ell] = v
        print(f"replicate {rep + 1}/{a.reps} done", flush=True)
    ref = replication_smoothing_variance(model, a.ell, a.T, lambda x: x, a.oracle_n, a.oracle_r, RngStream(a.seed, 2**50))
    q = np.quantile(est, [0.25, 0.5, 0.75], axis=0)
    with open(a.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "q25", "median", "q75", "oracle", "oracle_se"])
        for i in range(a.T - a.ell + 1):
            w.writerow([a.ell + i, *q[:, i], ref.estimate[i], ref.stderr[i]])


if __name__ == "__main__":
    main()
