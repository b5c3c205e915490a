"""Time the compiled and pure-Python assignment / IoU kernels side by side.

    python benchmarks/bench_kernels.py [--sizes 4 8 16 32] [--repeat 5]

Outputs agree across backends before anything is timed.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np
from scipy.optimize import linear_sum_assignment

from mqtrack.kernels import BACKEND, IMPLEMENTATIONS, iou_matrix, linear_assignment


def random_boxes(rng, n):
    xy = rng.uniform(0, 100, (n, 2))
    wh = rng.uniform(5, 30, (n, 2))
    return np.hstack([xy, xy + wh])


def best_of(fn, repeat: int) -> float:
    """Seconds per call, best of ``repeat`` runs."""
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", type=int, nargs="+", default=[4, 8, 16, 32, 64])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = sorted(IMPLEMENTATIONS)
    print(f"default backend: {BACKEND}; timing: {', '.join(backends)}")
    if "cython" not in backends:
        print("compiled extension not built; only the fallback is timed")
    rng = np.random.default_rng(args.seed)

    header = f"{'kernel':<12}{'n':>5}" + "".join(f"{b + ' us':>14}" for b in backends) + f"{'speedup':>10}"
    print(header)
    for n in args.sizes:
        cost = rng.random((n, n))
        a, b = random_boxes(rng, n), random_boxes(rng, n)
        # check before timing
        rows, cols = linear_sum_assignment(cost)
        ref = cost[rows, cols].sum()
        for be in backends:
            pairs = linear_assignment(cost, backend=be)
            assert np.isclose(sum(cost[r, c] for r, c in pairs), ref)
        ious = [iou_matrix(a, b, backend=be) for be in backends]
        assert all(np.allclose(ious[0], x) for x in ious[1:])

        for name, fn in (("assignment", lambda be: linear_assignment(cost, backend=be)),
                         ("iou", lambda be: iou_matrix(a, b, backend=be))):
            times = {be: best_of(lambda be=be: fn(be), args.repeat) for be in backends}
            speed = times["python"] / times["cython"] if "cython" in times else 1.0
            print(f"{name:<12}{n:>5}" + "".join(f"{times[be] * 1e6:>14.1f}" for be in backends) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
