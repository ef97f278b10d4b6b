"""Compare the compiled kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best time of each implementation and
the speedup. Exits with an error if the compiled module is not built.
"""
from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from islandsdb import _kernels_py as py

try:
    from islandsdb import _ckernels as cy
except ImportError:
    sys.exit("compiled kernels not built; run `pip install -e .` first")


def cases():
    cdf = py.zipf_cdf(100_000, 1.0)
    us = np.random.default_rng(0).random(200_000)
    scalar = us[:20_000].tolist()
    lat = [[0 if a == b else (100 if a // 4 == b // 4 else 500) for b in range(16)]
           for a in range(16)]
    single = [list(range(16))]
    per_core = [[c] for c in range(16)]
    return {
        "zipf_cdf n=1e6 s=1": lambda m: m.zipf_cdf(1_000_000, 1.0),
        "zipf_rank x20000": lambda m: [m.zipf_rank(cdf, u) for u in scalar],
        "zipf_ranks 2e5": lambda m: m.zipf_ranks(cdf, us),
        "xorshift64 x1e5": lambda m: _xs_chain(m.xorshift64, 100_000),
        "sim_counter single 2ms": lambda m: m.sim_counter_run(
            single, lat, 20, 10, 5, 2_000_000, 1),
        "sim_counter per-core 2ms": lambda m: m.sim_counter_run(
            per_core, lat, 20, 10, 5, 2_000_000, 1),
    }


def _xs_chain(fn, n):
    x = 1
    for _ in range(n):
        x = fn(x)
    return x


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    print(f"{'kernel':28s} {'python_ms':>10s} {'cython_ms':>10s} {'speedup':>8s}")
    for name, fn in cases().items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat))
        print(f"{name:28s} {t_py * 1e3:10.2f} {t_cy * 1e3:10.2f} {t_py / t_cy:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
