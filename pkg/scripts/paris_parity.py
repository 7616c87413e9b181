"""PaRIS against exact backward statistics on the same particle systems.

Writes per-step quartiles of bs_var_eta and paris_var_eta across runs.

    python3 scripts/paris_parity.py --n 1000 -T 750 --reps 50 -M 3
"""

import argparse
import csv

import numpy as np

from smcvar.experiment import ExperimentConfig, build_model, run_replicate


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("-T", type=int, default=750)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("-M", type=int, default=3)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("-o", "--output", default="paris_parity.csv")
    a = p.parse_args()

    key = f"paris:{a.M}"
    cfg = ExperimentConfig(model="sv", n=a.n, T=a.T, estimators=["bs", key], seed=a.seed)
    model = build_model(cfg)
    est = {"bs": np.empty((a.reps, a.T + 1)), key: np.empty((a.reps, a.T + 1))}
    for rep in range(a.reps):
        rows, _ = run_replicate(cfg, rep, model)
        for _, t, name, v, _, _ in rows:
            est[name][rep, t] = v
        print(f"replicate {rep + 1}/{a.reps} done", flush=True)
    with open(a.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "bs_q25", "bs_median", "bs_q75", "paris_q25", "paris_median", "paris_q75"])
        qb = np.quantile(est["bs"], [0.25, 0.5, 0.75], axis=0)
        qp = np.quantile(est[key], [0.25, 0.5, 0.75], axis=0)
        for t in range(a.T + 1):
            w.writerow([t, *qb[:, t], *qp[:, t]])
    inside = np.mean((qp[1] >= qb[0]) & (qp[1] <= qb[2]))
    print(f"median PaRIS inside the backward IQR at {100 * inside:.1f}% of steps")


if __name__ == "__main__":
    main()
