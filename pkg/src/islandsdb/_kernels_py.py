"""Pure-Python kernels. Reference semantics for the compiled twin."""
from __future__ import annotations

import bisect
import threading
import time

import numpy as np

IMPLEMENTATION = "python"

_MASK = (1 << 64) - 1


def zipf_cdf(n: int, s: float) -> np.ndarray:
    """Cumulative Zipf distribution over ranks 1..n; last entry is 1.0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    weights = np.arange(1, n + 1, dtype=np.float64) ** -float(s)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    cdf[-1] = 1.0
    return cdf


def zipf_rank(cdf, u: float) -> int:
    """0-based rank r with cdf[r-1] <= u < cdf[r]."""
    r = bisect.bisect_right(cdf, u)
    return r if r < len(cdf) else len(cdf) - 1


def zipf_ranks(cdf, us) -> np.ndarray:
    us = np.asarray(us, dtype=np.float64)
    out = np.searchsorted(cdf, us, side="right")
    np.minimum(out, len(cdf) - 1, out=out)
    return out.astype(np.int64)


def xorshift64(x: int) -> int:
    x ^= (x << 13) & _MASK
    x ^= x >> 7
    x ^= (x << 17) & _MASK
    return x


def sim_counter_run(contenders, latency, cs_ns: int, think_ns: int,
                    jitter_ns: int, duration_ns: int, seed: int) -> list[int]:
    """Increments per counter for lock-protected counters in logical time.

    ``contenders[c]`` lists the cores hammering counter ``c``; ``latency``
    is a cores x cores matrix of cache-line transfer costs. The next lock
    holder is drawn uniformly among the contenders; every acquisition pays
    the transfer from the previous holder plus a jittered critical section.
    """
    counts = []
    for c, cores in enumerate(contenders):
        k = len(cores)
        x = (seed * 0x9E3779B97F4A7C15 + c + 1) & _MASK or 1
        t = 0
        n = 0
        prev = cores[0]
        while True:
            x = xorshift64(x)
            nxt = cores[(x >> 11) % k] if k > 1 else prev
            x = xorshift64(x)
            cost = cs_ns + (x >> 11) % (2 * jitter_ns + 1) + latency[prev][nxt]
            if nxt == prev:
                cost += think_ns
            if t + cost > duration_ns:
                break
            t += cost
            n += 1
            prev = nxt
        counts.append(n)
    return counts


def real_counter_run(counter_of, seconds: float, cores=None) -> list[int]:
    """Threads incrementing lock-protected counters for ``seconds``.

    ``counter_of[i]`` is the counter thread ``i`` increments. GIL-bound.
    """
    n_counters = max(counter_of) + 1 if counter_of else 0
    locks = [threading.Lock() for _ in range(n_counters)]
    counters = [0] * n_counters
    stop = threading.Event()

    def body(i):
        if cores is not None:
            _pin(cores[i])
        lk = locks[counter_of[i]]
        c = counter_of[i]
        while not stop.is_set():
            for _ in range(64):
                with lk:
                    counters[c] += 1

    threads = [threading.Thread(target=body, args=(i,), daemon=True)
               for i in range(len(counter_of))]
    for t in threads:
        t.start()
    time.sleep(max(seconds, 0.0))
    stop.set()
    for t in threads:
        t.join()
    return counters


def _pin(core):
    import os
    try:
        os.sched_setaffinity(0, {core})
    except (AttributeError, OSError):
        pass
