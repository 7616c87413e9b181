"""Long-run behaviour of the CLE and backward estimators on the SV model.

Writes per-step medians of the estimates, of the disjointness measures
D^GT and D^BS, and of the relative errors against a replication oracle.

    python3 scripts/time_dependence.py --n 500 -T 1500 --reps 30 -o time_dep.csv
    python3 scripts/time_dependence.py --n 1000 -T 3000 --reps 30 --oracle-n 10000 --oracle-r 1000
"""

import argparse
import csv

import numpy as np

from smcvar.experiment import ExperimentConfig, build_model, compute_error_metric, run_replicate
from smcvar.oracle import replication_variance
from smcvar.rng import RngStream


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--n", type=int, default=500)
    p.add_argument("-T", type=int, default=1500)
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--oracle-n", type=int, default=4000)
    p.add_argument("--oracle-r", type=int, default=500)
    p.add_argument("--oracle-T", type=int, help="last oracle step (default 1.2 N)")
    p.add_argument("--seed", type=int, default=6)
    p.add_argument("-o", "--output", default="time_dependence.csv")
    a = p.parse_args()

    cfg = ExperimentConfig(model="sv", n=a.n, T=a.T, estimators=["cle", "bs"], seed=a.seed)
    model = build_model(cfg)
    shape = (a.reps, a.T + 1)
    cle, bsv, d_bs, d_gt = (np.empty(shape) for _ in range(4))
    for rep in range(a.reps):
        rows, _ = run_replicate(cfg, rep, model)
        for _, t, name, est, db, dg in rows:
            (cle if name == "cle" else bsv)[rep, t] = est
            d_bs[rep, t], d_gt[rep, t] = db, dg
        print(f"replicate {rep + 1}/{a.reps} done", flush=True)
    horizon = min(a.T, a.oracle_T if a.oracle_T is not None else int(1.2 * a.n))
    ref = replication_variance(model, horizon, lambda x: x, a.oracle_n, a.oracle_r, RngStream(a.seed, 2**50), chunk=25)

    with open(a.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "median_cle", "median_bs", "median_d_gt", "median_d_bs", "oracle", "oracle_se", "median_e_gt", "median_e_bs"])
        for t in range(a.T + 1):
            row = [t, np.median(cle[:, t]), np.median(bsv[:, t]), np.median(d_gt[:, t]), np.median(d_bs[:, t])]
            if t <= horizon:
                r = ref.estimate[t]
                row += [r, ref.stderr[t], np.median(compute_error_metric(cle[:, t], r)), np.median(compute_error_metric(bsv[:, t], r))]
            else:
                row += ["", "", "", ""]
            w.writerow(row)


if __name__ == "__main__":
    main()
