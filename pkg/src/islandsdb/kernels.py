"""Hot kernels, compiled when available.

The Cython build (``islandsdb._ckernels``) is used unless it is missing or
``ISLANDSDB_PURE_PYTHON=1`` is set. Both expose the same functions. Given
the same inputs, they return identical ranks, counts and random streams;
Zipf CDFs agree to floating-point rounding.
"""
from __future__ import annotations

import os

if os.environ.get("ISLANDSDB_PURE_PYTHON") == "1":
    from . import _kernels_py as _impl
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        from . import _kernels_py as _impl

IMPLEMENTATION: str = _impl.IMPLEMENTATION
zipf_cdf = _impl.zipf_cdf
zipf_rank = _impl.zipf_rank
zipf_ranks = _impl.zipf_ranks
xorshift64 = _impl.xorshift64
sim_counter_run = _impl.sim_counter_run
real_counter_run = _impl.real_counter_run

__all__ = ["IMPLEMENTATION", "zipf_cdf", "zipf_rank", "zipf_ranks",
           "xorshift64", "sim_counter_run", "real_counter_run"]
