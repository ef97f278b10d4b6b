import io
import itertools
import random

import pytest

from islandsdb.storage import (PAYLOAD_SIZE, Instance, InstanceShutdown,
                               LockConflict, LockManager, LockMode, LogError,
                               NotFound, RecordKind, Table, TxnState,
                               TxnStateError, Vote, WrongPartition, abort_local,
                               begin, commit_local, initial_payload,
                               next_payload, prepare_local, read_row, replay,
                               update_row)


def inst(lo=0, hi=16, **kw):
    return Instance(0, lo, hi, **kw)


def pay(tag):
    return bytes([tag % 256]) * PAYLOAD_SIZE


def kinds(i):
    return [r.kind for r in i.wal]


def test_payloads_are_deterministic():
    assert initial_payload(3) == initial_payload(3) != initial_payload(4)
    assert len(initial_payload(3)) == PAYLOAD_SIZE
    a = next_payload(next_payload(initial_payload(1), 1), 2)
    b = next_payload(next_payload(initial_payload(1), 2), 1)
    assert a != b and len(a) == PAYLOAD_SIZE


def test_begin():
    i = inst()
    t1, t2 = begin(i), begin(i)
    assert t1.state is TxnState.ACTIVE and not t1.locks
    assert t1.txn_id != t2.txn_id
    i.shutdown()
    with pytest.raises(InstanceShutdown):
        begin(i)


def test_table_range_and_lookup():
    t = Table(10, 20)
    t.load()
    assert len(t) == 10
    assert [r.key for r in t] == list(range(10, 20))
    with pytest.raises(WrongPartition):
        t.get(20)
    t2 = Table(0, 5)
    t2.load([0, 1])
    with pytest.raises(NotFound):
        t2.get(3)


def test_read_row():
    i = inst()
    t = begin(i)
    assert read_row(t, 3) == initial_payload(3)
    assert t.read_set == {3}
    with pytest.raises(WrongPartition):
        read_row(t, 16)


# compatibility matrix: (held, requested) -> granted?
COMPAT = {(LockMode.SHARED, LockMode.SHARED): True,
          (LockMode.SHARED, LockMode.EXCLUSIVE): False,
          (LockMode.EXCLUSIVE, LockMode.SHARED): False,
          (LockMode.EXCLUSIVE, LockMode.EXCLUSIVE): False}


@pytest.mark.parametrize("held,req", list(COMPAT))
def test_no_wait_conflict_table(held, req):
    lm = LockManager()
    lm.acquire("a", 1, held)
    if COMPAT[(held, req)]:
        assert lm.acquire("b", 1, req)
    else:
        with pytest.raises(LockConflict):
            lm.acquire("b", 1, req)


def test_lock_upgrade_and_release():
    lm = LockManager()
    assert lm.acquire("a", 1, LockMode.SHARED)
    assert not lm.acquire("a", 1, LockMode.EXCLUSIVE)
    assert lm.holders(1) == (LockMode.EXCLUSIVE, frozenset({"a"}))
    lm.acquire("b", 2, LockMode.SHARED)
    lm.acquire("c", 2, LockMode.SHARED)
    with pytest.raises(LockConflict):
        lm.acquire("b", 2, LockMode.EXCLUSIVE)
    lm.release("a", 1)
    lm.release("b", 2)
    lm.release("c", 2)
    assert lm.is_idle()


def test_read_blocked_by_writer_aborts_requester():
    i = inst()
    w, r = begin(i), begin(i)
    update_row(w, 5, pay(1))
    with pytest.raises(LockConflict):
        read_row(r, 5)
    assert r.failed


def test_read_your_writes_and_rollback():
    i = inst()
    t = begin(i)
    update_row(t, 2, pay(9))
    assert read_row(t, 2) == pay(9)
    abort_local(t)
    row = i.table.get(2)
    assert row.payload == initial_payload(2) and row.version == 0


def test_two_writers_interleavings():
    # every interleaving of two 1-update transactions on one key
    steps = {"A": ["u", "c"], "B": ["u", "c"]}
    for order in set(itertools.permutations("AABB")):
        i = inst()
        txns = {n: begin(i) for n in "AB"}
        pos = {n: 0 for n in "AB"}
        dead = set()
        for n in order:
            if n in dead:
                continue
            op = steps[n][pos[n]]
            pos[n] += 1
            t = txns[n]
            if op == "u":
                try:
                    update_row(t, 1, pay(ord(n)))
                except LockConflict:
                    abort_local(t)
                    dead.add(n)
            else:
                commit_local(t)
        committed = [n for n in "AB" if txns[n].state is TxnState.COMMITTED]
        s = "".join(order)
        if s in ("AABB", "BBAA"):
            # serial: both commit, the later one wins
            assert len(committed) == 2
            assert i.table.get(1).payload == pay(ord(s[-1]))
        else:
            assert len(committed) == 1
            assert i.table.get(1).payload == pay(ord(committed[0]))


def test_commit_records():
    i = inst()
    t = begin(i)
    read_row(t, 1)
    commit_local(t)
    assert kinds(i) == [RecordKind.COMMIT]
    t = begin(i)
    for k in range(4):
        update_row(t, k, pay(k))
    commit_local(t)
    assert kinds(i)[1:] == [RecordKind.UPDATE] * 4 + [RecordKind.COMMIT]
    assert all(i.table.get(k).version == 1 for k in range(4))


def test_commit_releases_locks():
    i = inst()
    a, b = begin(i), begin(i)
    update_row(a, 1, pay(1))
    with pytest.raises(LockConflict):
        update_row(b, 1, pay(2))
    commit_local(a)
    c = begin(i)
    update_row(c, 1, pay(3))
    commit_local(c)
    assert i.table.get(1).version == 2


def test_abort_examples():
    i = inst()
    t = begin(i)
    update_row(t, 1, pay(1))
    update_row(t, 2, pay(2))
    update_row(t, 1, pay(3))
    abort_local(t)
    assert i.table.get(1).payload == initial_payload(1)
    assert i.table.get(2).payload == initial_payload(2)
    t = begin(i)
    read_row(t, 3)
    abort_local(t)
    assert i.table.get(3).payload == initial_payload(3)
    t = begin(i, gtid=7)
    update_row(t, 4, pay(4))
    assert prepare_local(t) is Vote.YES
    abort_local(t)
    ks = kinds(i)
    assert ks.index(RecordKind.PREPARE) < len(ks) - 1 and ks[-1] is RecordKind.ABORT
    assert i.table.get(4).payload == initial_payload(4)


def test_prepare_votes():
    i = inst()
    t = begin(i, gtid=1)
    update_row(t, 1, pay(1))
    assert prepare_local(t) is Vote.YES and t.state is TxnState.PREPARED
    assert RecordKind.PREPARE in kinds(i)
    a, b = begin(i, gtid=2), begin(i, gtid=3)
    update_row(a, 2, pay(2))
    with pytest.raises(LockConflict):
        update_row(b, 2, pay(3))
    assert prepare_local(b) is Vote.NO and b.state is TxnState.ABORTED
    r = begin(i, gtid=4)
    read_row(r, 5)
    assert prepare_local(r) is Vote.YES_READ_ONLY
    assert r.state is TxnState.COMMITTED and not r.locks


def test_prepare_log_failure_votes_no():
    i = inst()
    t = begin(i, gtid=1)
    update_row(t, 1, pay(1))
    i.wal.fail_flush = True
    assert prepare_local(t) is Vote.NO
    assert i.table.get(1).payload == initial_payload(1)


def test_commit_log_failure_surfaces():
    i = inst()
    t = begin(i)
    update_row(t, 1, pay(1))
    i.wal.fail_flush = True
    with pytest.raises(LogError):
        commit_local(t)


def test_state_machine_guards():
    i = inst()
    t = begin(i)
    commit_local(t)
    with pytest.raises(TxnStateError):
        abort_local(t)
    with pytest.raises(TxnStateError):
        update_row(t, 1, pay(1))


def test_locking_disabled_requires_single_worker():
    with pytest.raises(ValueError):
        Instance(0, 0, 4, locking=False, n_workers=2)


def _serial_run(locking, ops):
    i = Instance(0, 0, 8, locking=locking, n_workers=1)
    for tag, keys, commit in ops:
        t = begin(i)
        for k in keys:
            update_row(t, k, next_payload(i.table.get(k).payload, tag))
        (commit_local if commit else abort_local)(t)
    return i


def test_lock_elision_equivalence():
    rng = random.Random(5)
    ops = [(n, rng.sample(range(8), 3), rng.random() < 0.8) for n in range(60)]
    a, b = _serial_run(True, ops), _serial_run(False, ops)
    assert a.table.snapshot() == b.table.snapshot()
    assert b.locks.is_idle()


def test_elided_instance_still_locks_under_distributed_branch():
    i = Instance(0, 0, 8, locking=False, n_workers=1)
    branch = begin(i, gtid=9)
    update_row(branch, 1, pay(1))
    assert prepare_local(branch) is Vote.YES
    local = begin(i)
    assert local.uses_locks
    with pytest.raises(LockConflict):
        update_row(local, 1, pay(2))


def test_replay_and_version_conservation():
    rng = random.Random(11)
    i = inst(0, 12)
    init = {k: initial_payload(k) for k in range(12)}
    commits = {k: 0 for k in range(12)}
    for n in range(200):
        t = begin(i, gtid=n if n % 3 == 0 else None)
        keys = rng.sample(range(12), 3)
        for k in keys:
            update_row(t, k, next_payload(i.table.get(k).payload, n))
        if n % 3 == 0:
            prepare_local(t)
        if rng.random() < 0.7:
            commit_local(t)
            for k in keys:
                commits[k] += 1
        else:
            abort_local(t)
    lsns = [r.lsn for r in i.wal]
    assert lsns == sorted(set(lsns))
    final = {k: p for k, (p, _) in i.table.snapshot().items()}
    assert replay(i.wal, init) == final
    assert {k: v for k, (_, v) in i.table.snapshot().items()} == commits


def test_log_sink_receives_records():
    buf = io.BytesIO()
    i = Instance(0, 0, 4, log_sink=buf)
    t = begin(i)
    update_row(t, 1, pay(1))
    commit_local(t)
    assert buf.getvalue().count(b"\n") == 2
