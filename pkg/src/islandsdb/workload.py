"""Transaction generators: read/update-N microbenchmarks, skewed two-row
transactions and a fully partitionable hot-row (Payment-like) workload."""
from __future__ import annotations

import enum
import random
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import kernels
from .deployment import PartitionMap
from .transport import Op
from .txn import TxnRequest


class InvalidSpec(ValueError):
    pass


class WorkloadKind(str, enum.Enum):
    MICRO_READ = "MicroRead"
    MICRO_UPDATE = "MicroUpdate"
    PAYMENT_LIKE = "PaymentLike"


@dataclass(frozen=True)
class WorkloadSpec:
    kind: WorkloadKind = WorkloadKind.MICRO_UPDATE
    rows_per_txn: int = 10
    pct_multisite: float = 0.0
    zipf_s: float = 0.0
    total_rows: int = 16000
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", WorkloadKind(self.kind))
        if self.rows_per_txn < 1:
            raise InvalidSpec("rows_per_txn must be >= 1")
        if not 0.0 <= self.pct_multisite <= 100.0:
            raise InvalidSpec("pct_multisite must lie in [0, 100]")
        if self.zipf_s < 0:
            raise InvalidSpec("zipf_s must be >= 0")
        if self.total_rows < 1:
            raise InvalidSpec("total_rows must be >= 1")

    @property
    def op(self) -> Op:
        return Op.READ if self.kind is WorkloadKind.MICRO_READ else Op.UPDATE


@dataclass(frozen=True)
class ZipfTable:
    n: int
    s: float
    cdf: np.ndarray
    # rank -> key offset; None is the identity (hottest key first)
    perm: np.ndarray | None = None

    def pmf(self) -> np.ndarray:
        return np.diff(self.cdf, prepend=0.0)


def make_zipf_table(n: int, s: float, shuffle_seed: int | None = None) -> ZipfTable:
    if n < 1:
        raise InvalidSpec("zipf domain must be nonempty")
    if s < 0:
        raise InvalidSpec("zipf skew must be >= 0")
    perm = None
    if shuffle_seed is not None:
        perm = np.random.default_rng(shuffle_seed).permutation(n)
    return ZipfTable(n, float(s), kernels.zipf_cdf(n, float(s)), perm)


@lru_cache(maxsize=64)
def _table(n: int, s: float) -> ZipfTable:
    return make_zipf_table(n, s)


def zipf_sample(zt: ZipfTable, u: float) -> int:
    """Inverse-CDF draw; returns a key offset in ``[0, n)``."""
    r = kernels.zipf_rank(zt.cdf, u)
    return int(zt.perm[r]) if zt.perm is not None else r


def _check(spec: WorkloadSpec, pm: PartitionMap, origin: int) -> tuple[int, int]:
    if spec.total_rows != pm.total_rows:
        raise InvalidSpec(
            f"workload covers {spec.total_rows} rows, partition map {pm.total_rows}")
    lo, hi = pm.range_of(origin)
    need = 2 if spec.kind is WorkloadKind.PAYMENT_LIKE else spec.rows_per_txn
    if hi - lo < need:
        raise InvalidSpec(f"instance {origin} owns {hi - lo} rows, "
                          f"transactions need {need}")
    return lo, hi


def _distinct(draw, n: int, first: list[int] | None = None) -> list[int]:
    keys = list(first or [])
    seen = set(keys)
    while len(keys) < n:
        k = draw()
        if k not in seen:
            seen.add(k)
            keys.append(k)
    return keys


def next_txn(spec: WorkloadSpec, pm: PartitionMap, origin: int,
             rng: random.Random) -> TxnRequest:
    """One transaction originating at instance ``origin``.

    Local transactions touch N distinct rows of the origin's range. With
    probability ``pct_multisite/100`` the transaction is multisite instead:
    one local row plus N-1 rows over the whole key range. With ``zipf_s > 0``
    every draw is skewed; multisite draws then cover the whole range
    (including the first key) and local draws skew within the origin range.
    """
    lo, hi = _check(spec, pm, origin)
    if spec.kind is WorkloadKind.PAYMENT_LIKE:
        return _payment(lo, hi, origin, rng)
    n = spec.rows_per_txn
    multisite = rng.random() * 100.0 < spec.pct_multisite
    total = pm.total_rows
    if spec.zipf_s > 0:
        if multisite:
            zt = _table(total, spec.zipf_s)
            keys = _distinct(lambda: zipf_sample(zt, rng.random()), n)
        else:
            zt = _table(hi - lo, spec.zipf_s)
            keys = _distinct(lambda: lo + zipf_sample(zt, rng.random()), n)
    elif multisite:
        keys = _distinct(lambda: rng.randrange(total), n,
                         [rng.randrange(lo, hi)])
    else:
        keys = rng.sample(range(lo, hi), n)
    return TxnRequest(spec.op, tuple(keys), origin, multisite)


def _payment(lo: int, hi: int, origin: int, rng: random.Random) -> TxnRequest:
    # the first row of each partition plays the warehouse row
    return TxnRequest(Op.UPDATE, (lo, rng.randrange(lo + 1, hi)), origin, False)


def hot_key(pm: PartitionMap, origin: int) -> int:
    return pm.range_of(origin)[0]


def payment_like(spec: WorkloadSpec, pm: PartitionMap, origin: int,
                 rng: random.Random) -> Iterator[TxnRequest]:
    if spec.kind is not WorkloadKind.PAYMENT_LIKE:
        raise InvalidSpec("payment_like needs a PaymentLike spec")
    lo, hi = _check(spec, pm, origin)
    while True:
        yield _payment(lo, hi, origin, rng)


def worker_rng(seed: int, worker_id: int) -> random.Random:
    return random.Random(seed ^ worker_id)


class WorkloadSource:
    """Per-worker request streams for the simulator (``Sim(source=...)``).

    Worker ``j`` of instance ``i`` has id ``i * workers_per_instance + j``
    and its own generator seeded ``seed ^ id``.
    """

    def __init__(self, spec: WorkloadSpec, pm: PartitionMap,
                 workers_per_instance: int):
        self.spec = spec
        self.pm = pm
        self.wpi = workers_per_instance
        self._rngs: dict[int, random.Random] = {}
        for i in range(pm.n_instances):
            _check(spec, pm, i)

    def __call__(self, worker) -> TxnRequest:
        wid = worker.node_id * self.wpi + worker.index
        rng = self._rngs.get(wid)
        if rng is None:
            rng = self._rngs[wid] = worker_rng(self.spec.rng_seed, wid)
        return next_txn(self.spec, self.pm, worker.node_id, rng)
