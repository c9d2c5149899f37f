"""Compare the numba and numpy kernel backends.

Two views are timed:

* kernel level: both implementations are called in one process on the same
  sampled graphs, so the numbers isolate the kernels themselves;
* end to end: expert-dataset generation runs in a fresh interpreter per
  backend (selected through ``PASSIVE_CAUSAL_BACKEND``), which includes
  everything around the kernels as well as numba compile time.

Usage: ``python benchmarks/bench_backends.py [--episodes 2000] [--repeat 5]``
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from passive_causal import kernels
from passive_causal._accel import HAVE_NUMBA
from passive_causal.scm import DagConfig, sample_dag

GEN_SNIPPET = """
import sys, time
from passive_causal.dataset import DatasetManifest, simulate_record
m = DatasetManifest(master_seed=3, episode_count=None)
simulate_record(m, 0)
t = time.perf_counter()
for i in range(int(sys.argv[1])):
    simulate_record(m, i)
print(time.perf_counter() - t)
"""


def kernel_cases(n: int, batch: int, samples: int, rng: np.random.Generator):
    dag = sample_dag(DagConfig(n=n), None, rng)
    g = (dag.order, dag.par_idx, dag.par_w)
    mask = rng.random((batch, n)) < 0.2
    val = rng.choice([-4.0, 4.0], size=(batch, n))
    eps = rng.normal(size=(batch, n))
    mc_eps = rng.normal(size=(samples, n))
    goal = int(dag.order[-1])
    return {
        "propagate_batch": lambda impl: impl(*g, mask, val, eps, True, 0.2),
        "candidate_values": lambda impl: impl(*g, dag.relevant, 4.0, True, 0.2, goal),
        "mc_candidate_means": lambda impl: impl(*g, dag.relevant, 4.0, True, 0.2, goal, mc_eps),
    }


def best_of(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--batch", type=int, default=1024)
    ap.add_argument("--samples", type=int, default=10_000)
    ap.add_argument("--episodes", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"kernels (n={args.n}, batch={args.batch}, mc samples={args.samples}); best of {args.repeat}")
    print(f"{'kernel':<20}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, call in kernel_cases(args.n, args.batch, args.samples, rng).items():
        np_impl, jit_impl = getattr(kernels, f"{name}_np"), getattr(kernels, f"{name}_jit")
        call(jit_impl)  # compile outside the timed region
        t_np = best_of(lambda: call(np_impl), args.repeat)
        t_jit = best_of(lambda: call(jit_impl), args.repeat)
        print(f"{name:<20}{t_np * 1e3:>12.3f}{t_jit * 1e3:>12.3f}{t_np / t_jit:>9.1f}x")

    print(f"\nexpert episodes, end to end ({args.episodes} episodes, n=5)")
    times = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, PASSIVE_CAUSAL_BACKEND=backend)
        res = subprocess.run([sys.executable, "-c", GEN_SNIPPET, str(args.episodes)], env=env,
                             capture_output=True, text=True, check=True)
        times[backend] = float(res.stdout.strip())
        print(f"  {backend:<6} {times[backend]:8.2f} s  ({args.episodes / times[backend]:,.0f} episodes/s)")
    print(f"  speedup {times['numpy'] / times['numba']:.2f}x")


if __name__ == "__main__":
    main()
