"""In-memory single-instance storage engine.

One :class:`Instance` holds a range of keys, a NO_WAIT row lock manager and
a write-ahead log. Transactions follow strict two-phase locking: locks are
taken on first access and released only when the transaction commits or
aborts.
"""
from __future__ import annotations

import bisect
import enum
import hashlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Iterator

PAYLOAD_SIZE = 100


class StorageError(Exception):
    pass


class WrongPartition(StorageError):
    pass


class NotFound(StorageError):
    pass


class InstanceShutdown(StorageError):
    pass


class LockConflict(StorageError):
    """Raised under NO_WAIT when a lock cannot be granted immediately."""

    def __init__(self, key: int, holder):
        super().__init__(f"lock conflict on key {key} (held by {holder})")
        self.key = key
        self.holder = holder


class TxnStateError(StorageError):
    pass


class LogError(StorageError):
    pass


def initial_payload(key: int) -> bytes:
    seed = key.to_bytes(8, "little")
    out = hashlib.blake2b(seed, digest_size=64).digest()
    out += hashlib.blake2b(out, digest_size=64).digest()
    return out[:PAYLOAD_SIZE]


def next_payload(old: bytes, txn_tag: int) -> bytes:
    """Deterministic update transform used by the update workloads.

    The new value depends on the old one, so applying updates in a different
    order yields a different final state.
    """
    h = hashlib.blake2b(old + txn_tag.to_bytes(8, "little"), digest_size=64).digest()
    return (h + h[:PAYLOAD_SIZE - 64])[:PAYLOAD_SIZE]


class LockMode(enum.Enum):
    SHARED = "S"
    EXCLUSIVE = "X"


@dataclass
class Row:
    key: int
    payload: bytes
    version: int = 0


class Table:
    """Ordered key -> row map restricted to ``[lo, hi)``."""

    def __init__(self, lo: int, hi: int):
        if lo > hi:
            raise ValueError("empty range must satisfy lo <= hi")
        self.lo, self.hi = lo, hi
        self._rows: dict[int, Row] = {}
        self._keys: list[int] = []

    def owns(self, key: int) -> bool:
        return self.lo <= key < self.hi

    def load(self, keys: Iterable[int] | None = None) -> None:
        keys = range(self.lo, self.hi) if keys is None else keys
        for k in keys:
            self.insert(Row(k, initial_payload(k)))

    def insert(self, row: Row) -> None:
        if not self.owns(row.key):
            raise WrongPartition(f"key {row.key} outside [{self.lo}, {self.hi})")
        if row.key not in self._rows:
            bisect.insort(self._keys, row.key)
        self._rows[row.key] = row

    def get(self, key: int) -> Row:
        if not self.owns(key):
            raise WrongPartition(f"key {key} outside [{self.lo}, {self.hi})")
        try:
            return self._rows[key]
        except KeyError:
            raise NotFound(key) from None

    def __len__(self) -> int:
        return len(self._rows)

    def __iter__(self) -> Iterator[Row]:
        return (self._rows[k] for k in self._keys)

    def snapshot(self) -> dict[int, tuple[bytes, int]]:
        return {k: (r.payload, r.version) for k, r in self._rows.items()}


class _Lock:
    __slots__ = ("mode", "holders")

    def __init__(self):
        self.mode: LockMode | None = None
        self.holders: set = set()


class LockManager:
    """Row lock table with NO_WAIT conflict resolution.

    ``enabled`` only controls whether purely local transactions may skip
    locking; participants of distributed transactions always lock.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._table: dict[int, _Lock] = {}
        self._mutex = threading.Lock()

    def acquire(self, txn_id, key: int, mode: LockMode) -> bool:
        """Grant or raise :class:`LockConflict`. Returns True if newly granted."""
        with self._mutex:
            lk = self._table.get(key)
            if lk is None:
                lk = self._table[key] = _Lock()
            if not lk.holders:
                lk.mode = mode
                lk.holders.add(txn_id)
                return True
            if txn_id in lk.holders:
                if mode is LockMode.SHARED or lk.mode is LockMode.EXCLUSIVE:
                    return False
                if len(lk.holders) == 1:
                    lk.mode = LockMode.EXCLUSIVE
                    return False
                other = next(h for h in lk.holders if h != txn_id)
                raise LockConflict(key, other)
            if mode is LockMode.SHARED and lk.mode is LockMode.SHARED:
                lk.holders.add(txn_id)
                return True
            raise LockConflict(key, next(iter(lk.holders)))

    def release(self, txn_id, key: int) -> None:
        with self._mutex:
            lk = self._table.get(key)
            if lk is None:
                return
            lk.holders.discard(txn_id)
            if not lk.holders:
                del self._table[key]

    def holders(self, key: int) -> tuple[LockMode | None, frozenset]:
        lk = self._table.get(key)
        if lk is None:
            return None, frozenset()
        return lk.mode, frozenset(lk.holders)

    def held_count(self) -> int:
        return len(self._table)

    def is_idle(self) -> bool:
        return not self._table


class RecordKind(enum.Enum):
    UPDATE = "update"
    COMMIT = "commit"
    ABORT = "abort"
    PREPARE = "prepare"
    END_DISTRIBUTED = "end"


@dataclass(frozen=True)
class LogRecord:
    lsn: int
    txn_id: int
    kind: RecordKind
    key: int | None = None
    before: bytes | None = None
    after: bytes | None = None
    gtid: int | None = None


class Wal:
    """Append-only log. ``flush`` is a synchronous append acknowledgement;
    an optional binary sink receives one text line per record."""

    def __init__(self, sink: BinaryIO | None = None):
        self.records: list[LogRecord] = []
        self._lsn = itertools.count(1)
        self._mutex = threading.Lock()
        self.sink = sink
        self.fail_flush = False
        self.flushes = 0

    def append(self, txn_id: int, kind: RecordKind, key: int | None = None,
               before: bytes | None = None, after: bytes | None = None,
               gtid: int | None = None) -> LogRecord:
        with self._mutex:
            rec = LogRecord(next(self._lsn), txn_id, kind, key, before, after, gtid)
            self.records.append(rec)
        if self.sink is not None:
            line = f"{rec.lsn} {rec.txn_id} {rec.kind.value} {rec.key} {rec.gtid}"
            if rec.after is not None:
                line += " " + rec.after.hex()
            self.sink.write(line.encode() + b"\n")
        return rec

    def flush(self) -> None:
        if self.fail_flush:
            raise LogError("log flush failed")
        if self.sink is not None:
            self.sink.flush()
        self.flushes += 1

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[LogRecord]:
        return iter(self.records)


class TxnState(enum.Enum):
    ACTIVE = "active"
    PREPARED = "prepared"
    COMMITTED = "committed"
    ABORTED = "aborted"


class Vote(enum.Enum):
    YES = "yes"
    YES_READ_ONLY = "yes-ro"
    NO = "no"


@dataclass(eq=False)
class LocalTxn:
    txn_id: int
    instance: "Instance"
    gtid: int | None = None
    state: TxnState = TxnState.ACTIVE
    read_set: set[int] = field(default_factory=set)
    write_set: dict[int, tuple[bytes, bytes]] = field(default_factory=dict)
    locks: list[int] = field(default_factory=list)
    # undo order; before-image captured once per key
    _write_order: list[int] = field(default_factory=list)
    uses_locks: bool = True
    failed: bool = False

    @property
    def read_only(self) -> bool:
        return not self.write_set

    @property
    def txn_key(self) -> tuple[int, int]:
        return (self.instance.instance_id, self.txn_id)


class Instance:
    """One shared-nothing database instance owning ``[lo, hi)``."""

    def __init__(self, instance_id: int, lo: int, hi: int, *,
                 locking: bool = True, n_workers: int = 1,
                 log_sink: BinaryIO | None = None, load: bool = True):
        if not locking and n_workers != 1:
            raise ValueError("locking may only be disabled for 1-worker instances")
        self.instance_id = instance_id
        self.table = Table(lo, hi)
        if load:
            self.table.load()
        self.locks = LockManager(enabled=locking)
        self.wal = Wal(log_sink)
        self.n_workers = n_workers
        self.running = True
        self._ids = itertools.count(1)
        self.committed = 0
        self.aborted = 0

    # convenience so callers can write instance.begin() etc.
    def begin(self, gtid: int | None = None) -> LocalTxn:
        return begin(self, gtid)

    def shutdown(self) -> None:
        self.running = False


def begin(instance: Instance, gtid: int | None = None) -> LocalTxn:
    if not instance.running:
        raise InstanceShutdown(f"instance {instance.instance_id} is shutting down")
    txn = LocalTxn(next(instance._ids), instance, gtid)
    # distributed branches always lock; local ones may elide locks on a
    # single-worker instance while no distributed branch holds any lock
    txn.uses_locks = (gtid is not None or instance.locks.enabled
                      or not instance.locks.is_idle())
    return txn


def _check_active(txn: LocalTxn) -> None:
    if txn.state is not TxnState.ACTIVE:
        raise TxnStateError(f"txn {txn.txn_id} is {txn.state.value}")


def _lock(txn: LocalTxn, key: int, mode: LockMode) -> None:
    if not txn.uses_locks:
        return
    try:
        if txn.instance.locks.acquire(txn.txn_key, key, mode):
            txn.locks.append(key)
    except LockConflict:
        txn.failed = True
        raise


def read_row(txn: LocalTxn, key: int) -> bytes:
    _check_active(txn)
    row = txn.instance.table.get(key)
    _lock(txn, key, LockMode.SHARED)
    txn.read_set.add(key)
    return row.payload


def update_row(txn: LocalTxn, key: int, new_payload: bytes) -> None:
    _check_active(txn)
    if len(new_payload) != PAYLOAD_SIZE:
        raise ValueError(f"payload must be {PAYLOAD_SIZE} bytes")
    row = txn.instance.table.get(key)
    _lock(txn, key, LockMode.EXCLUSIVE)
    if key in txn.write_set:
        before = txn.write_set[key][0]
    else:
        before = row.payload
        txn._write_order.append(key)
    txn.write_set[key] = (before, new_payload)
    txn.instance.wal.append(txn.txn_id, RecordKind.UPDATE, key, row.payload,
                            new_payload, txn.gtid)
    row.payload = new_payload


def transform_row(txn: LocalTxn, key: int,
                  fn: Callable[[bytes], bytes]) -> bytes:
    """Exclusive-lock ``key`` and replace its payload with ``fn(old)``."""
    _check_active(txn)
    row = txn.instance.table.get(key)
    _lock(txn, key, LockMode.EXCLUSIVE)
    new = fn(row.payload)
    update_row(txn, key, new)
    return new


def _release(txn: LocalTxn) -> None:
    locks = txn.instance.locks
    for key in txn.locks:
        locks.release(txn.txn_key, key)
    txn.locks.clear()


def commit_local(txn: LocalTxn, force: bool = False) -> None:
    """Log Commit, flush when the txn wrote (or ``force``), release locks."""
    if txn.state not in (TxnState.ACTIVE, TxnState.PREPARED):
        raise TxnStateError(f"cannot commit txn in state {txn.state.value}")
    inst = txn.instance
    inst.wal.append(txn.txn_id, RecordKind.COMMIT, gtid=txn.gtid)
    if txn.write_set or force:
        inst.wal.flush()
    for key in txn.write_set:
        inst.table.get(key).version += 1
    txn.state = TxnState.COMMITTED
    _release(txn)
    inst.committed += 1


def abort_local(txn: LocalTxn) -> None:
    if txn.state not in (TxnState.ACTIVE, TxnState.PREPARED):
        raise TxnStateError(f"cannot abort txn in state {txn.state.value}")
    inst = txn.instance
    for key in reversed(txn._write_order):
        inst.table.get(key).payload = txn.write_set[key][0]
    inst.wal.append(txn.txn_id, RecordKind.ABORT, gtid=txn.gtid)
    txn.state = TxnState.ABORTED
    _release(txn)
    inst.aborted += 1


def prepare_local(txn: LocalTxn) -> Vote:
    """Phase one of two-phase commit for a participant branch.

    Read-only branches vote YES_READ_ONLY, release their shared locks and
    finish right away; the coordinator leaves them out of phase two.
    """
    if txn.failed or txn.state is not TxnState.ACTIVE:
        if txn.state is TxnState.ACTIVE:
            abort_local(txn)
        return Vote.NO
    if txn.read_only:
        commit_local(txn)
        return Vote.YES_READ_ONLY
    try:
        txn.instance.wal.append(txn.txn_id, RecordKind.PREPARE, gtid=txn.gtid)
        txn.instance.wal.flush()
    except LogError:
        abort_local(txn)
        return Vote.NO
    txn.state = TxnState.PREPARED
    return Vote.YES


def replay(records: Iterable[LogRecord], initial: dict[int, bytes]
           ) -> dict[int, bytes]:
    """Rebuild table contents from a log.

    Updates of a transaction are applied only when its Commit record is
    found; Prepare without a later Commit leaves the data untouched.
    """
    state = dict(initial)
    pending: dict[int, list[LogRecord]] = {}
    for rec in records:
        if rec.kind is RecordKind.UPDATE:
            pending.setdefault(rec.txn_id, []).append(rec)
        elif rec.kind is RecordKind.COMMIT:
            for u in pending.pop(rec.txn_id, []):
                state[u.key] = u.after
        elif rec.kind is RecordKind.ABORT:
            pending.pop(rec.txn_id, None)
    return state
