"""Wall-clock cost of one backward update and one PaRIS update versus N.

    python3 scripts/scaling.py --sizes 250 500 1000 2000 -M 3
"""

import argparse
import time

import numpy as np

from smcvar import backward, paris
from smcvar.rng import RngStream


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        tic = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - tic)
    return best


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[250, 500, 1000])
    p.add_argument("-M", type=int, default=3)
    p.add_argument("--repeat", type=int, default=5)
    a = p.parse_args()

    gen = np.random.default_rng(0)
    rows = []
    print("N,bs_update_s,paris_update_s")
    for n in a.sizes:
        beta = gen.dirichlet(np.ones(n), size=n)
        w = gen.dirichlet(np.ones(n))
        stats = backward.bs_update(backward.bs_init(n, track_s=False), beta, w)
        J = paris.paris_sample_indices(beta, a.M, RngStream(0, n))
        pst = paris.paris_update(paris.paris_init(n, a.M), J)
        tb = best_time(lambda: backward.bs_update(stats, beta, w), a.repeat)
        tp = best_time(lambda: paris.paris_update(pst, J), a.repeat)
        rows.append((n, tb, tp))
        print(f"{n},{tb:.6f},{tp:.6f}", flush=True)
    logs = np.log(np.array(rows))
    print(f"log-log slopes: bs_update {np.polyfit(logs[:, 0], logs[:, 1], 1)[0]:.2f}, paris_update {np.polyfit(logs[:, 0], logs[:, 2], 1)[0]:.2f}")


if __name__ == "__main__":
    main()
