"""Median relative error of bs_var_eta against the exact variance as N grows.

Uses a random two-state model, where the lumped statistics make large N cheap.

    python3 scripts/consistency.py -t 5 --sizes 500 2000 8000 32000 --reps 50
"""

import argparse

import numpy as np

from smcvar.backward import lumped_init, lumped_update, lumped_var_eta
from smcvar.core import run_filter
from smcvar.experiment import compute_error_metric
from smcvar.oracle import DiscreteHmm, exact_asym_var
from smcvar.rng import RngStream


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("-t", type=int, default=5)
    p.add_argument("--sizes", type=int, nargs="+", default=[500, 2000, 8000])
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--model-seed", type=int, default=100)
    p.add_argument("--seed", type=int, default=50)
    a = p.parse_args()

    hmm = DiscreteHmm.random(np.random.default_rng(a.model_seed), n_states=2, horizon=a.t)
    h = np.array([1.0, 0.0])
    exact = exact_asym_var(hmm, a.t, h, "eta")
    print(f"exact variance {exact:.6g}")
    print("N,median_rel_error,q25,q75")
    for n in a.sizes:
        errs = []
        for r in range(a.reps):
            states = list(run_filter(hmm, n, a.t, RngStream(a.seed, r * 100_000 + n)))
            lump = lumped_init(states[0].particles, 2)
            for s in range(1, a.t + 1):
                lump = lumped_update(lump, hmm.trans, hmm.g(s - 1), states[s].particles)
            errs.append(compute_error_metric(lumped_var_eta(lump, h), exact))
        q25, med, q75 = np.quantile(errs, [0.25, 0.5, 0.75])
        print(f"{n},{med:.4f},{q25:.4f},{q75:.4f}", flush=True)


if __name__ == "__main__":
    main()
