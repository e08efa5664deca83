"""Compiled (numba) vs pure numpy/Python kernels.

Run:  python benchmarks/bench_kernels.py [--repeat N]

Each row times one kernel on both backends after a warm-up call (so JIT
compilation is excluded) and checks that the two results agree.
"""
import argparse
import time

import numpy as np

from hetplan import _kernels
from hetplan._accel import HAVE_NUMBA
from hetplan.grouping import GroupingProblem, _Classes, _solve_dp
from hetplan.cluster import cluster_from_dict


def best_of(fn, repeat):
    fn()  # warm-up / compile
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def grouping_problem():
    spec = cluster_from_dict({
        "gpu_types": {"A100": {"compute_power": 1.0, "memory_bytes": 80e9},
                      "H800": {"compute_power": 2.0, "memory_bytes": 80e9},
                      "H20": {"compute_power": 1.5, "memory_bytes": 96e9}},
        "nodes": [{"node_id": 0, "count": 8, "type": "A100"},
                  {"node_id": 1, "count": 8, "type": "H800"},
                  {"node_id": 2, "count": 8, "type": "H20"}],
    })
    return GroupingProblem.for_cluster(spec, 1, 8, 150e9)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba unavailable (or HETPLAN_DISABLE_NUMBA set); nothing to compare")
        return

    rng = np.random.default_rng(0)
    buf = rng.integers(0, 256, size=1 << 20, dtype=np.uint8).tobytes()
    fwd = rng.uniform(0.5, 2.0, size=8)
    bwd = 2 * fwd
    comm = rng.uniform(0.0, 0.1, size=7)
    times = np.cumsum(rng.uniform(0.1, 1.0, size=(8, 129)), axis=1)
    times[:, 0] = np.inf
    problem = grouping_problem()
    classes = _Classes(problem)

    cases = [
        ("fnv1a64 1 MiB", lambda: _kernels.fnv1a64_numpy(buf), lambda: _kernels.fnv1a64_numba(buf)),
        ("1F1B schedule P=8 K=256", lambda: _kernels.schedule_numpy(fwd, bwd, comm, 256),
         lambda: _kernels.schedule_numba(fwd, bwd, comm, 256)),
        ("layer partition P=8 n=128", lambda: _kernels.balance_layers_numpy(times),
         lambda: _kernels.balance_layers_numba(times)),
        ("grouping DP 24 units", lambda: _solve_dp(problem, classes, use_numba=False),
         lambda: _solve_dp(problem, classes, use_numba=True)),
    ]
    print(f"{'kernel':<28}{'numpy s':>12}{'numba s':>12}{'speedup':>10}  agree")
    for name, slow, fast in cases:
        a, b = slow(), fast()
        agree = _same(a, b)
        ts, tf = best_of(slow, args.repeat), best_of(fast, args.repeat)
        print(f"{name:<28}{ts:>12.5f}{tf:>12.5f}{ts / tf:>9.1f}x  {agree}")


def _same(a, b):
    if isinstance(a, tuple) or isinstance(a, list):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(np.asarray(a), np.asarray(b))
    return a == b


if __name__ == "__main__":
    main()
