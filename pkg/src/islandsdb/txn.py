"""Global transactions: site classification and presumed-abort 2PC.

The coordinator and participant logic are written as generators that yield
effects (:class:`Work`, :class:`Send`, :class:`Await`, :data:`NOW`). The
discrete-event runtime in :mod:`islandsdb.sim` interprets them; the same
code therefore runs unchanged in every test and experiment.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Generator, Iterable

from .deployment import PartitionMap, partition_of
from .storage import (Instance, LocalTxn, LockConflict, LockMode, RecordKind,
                      StorageError, TxnState, Vote, abort_local, begin,
                      commit_local, next_payload, prepare_local, read_row,
                      transform_row)
from .transport import (BranchResult, DecisionValue, ExecBranch, Message,
                        MsgKind, Op, VoteValue)


class SiteClass(enum.Enum):
    LOCAL = "local"
    MULTISITE_LOCAL = "multisite-local"
    DISTRIBUTED = "distributed"


@dataclass(frozen=True)
class TxnRequest:
    op: Op
    keys: tuple[int, ...]
    origin: int
    # generated as a multisite transaction (may still be physically local)
    multisite: bool = False

    def __post_init__(self):
        if not self.keys:
            raise ValueError("a transaction needs at least one key")

    def unique_keys(self) -> tuple[int, ...]:
        return tuple(dict.fromkeys(self.keys))


@dataclass(frozen=True)
class SiteClassification:
    kind: SiteClass
    participants: frozenset[int]


def classify(req: TxnRequest, pm: PartitionMap) -> SiteClassification:
    """Participants are the instances owning the keys plus the origin,
    which always coordinates."""
    parts = {partition_of(pm, k) for k in req.keys}
    parts.add(req.origin)
    if len(parts) > 1:
        return SiteClassification(SiteClass.DISTRIBUTED, frozenset(parts))
    kind = SiteClass.MULTISITE_LOCAL if req.multisite else SiteClass.LOCAL
    return SiteClassification(kind, frozenset(parts))


class Phase(enum.IntEnum):
    EXECUTING = 0
    PREPARING = 1
    DECIDED = 2


@dataclass
class GlobalTxn:
    global_txn_id: int
    coordinator: int
    participants: frozenset[int]
    phase: Phase = Phase.EXECUTING
    decision: DecisionValue | None = None
    votes: dict[int, VoteValue] = field(default_factory=dict)

    def advance(self, phase: Phase) -> None:
        if phase < self.phase:
            raise RuntimeError(f"phase regression {self.phase.name} -> {phase.name}")
        self.phase = phase

    def decide(self, d: DecisionValue) -> None:
        if d is DecisionValue.COMMIT and any(
                v is VoteValue.NO for v in self.votes.values()):
            raise RuntimeError("commit decided despite a NO vote")
        self.advance(Phase.DECIDED)
        self.decision = d


@dataclass
class TxnOutcome:
    committed: bool
    gtid: int
    kind: SiteClass
    rows: dict[int, bytes] = field(default_factory=dict)
    reason: str = ""
    # logical time of the serialization point (commit, or lock point for
    # distributed reads)
    serial_ts: int = 0
    participants: frozenset[int] = frozenset()


# ---- effects -------------------------------------------------------------

class Category(str, enum.Enum):
    WORK = "work"
    COMM = "comm"
    LOG = "log"
    LOCKWAIT = "lockwait"


@dataclass(slots=True)
class Work:
    category: Category
    ns: int


@dataclass(slots=True)
class Send:
    msg: Message


@dataclass(slots=True)
class Await:
    """Block until a reply of ``kind`` arrives from every instance in
    ``expect`` or ``timeout_ns`` elapses. Resumes with ``{instance: msg}``.
    With an empty ``expect`` it is a plain sleep that still lets the worker
    serve inbound requests."""

    gtid: int | None
    expect: frozenset[int]
    kind: MsgKind | None
    timeout_ns: int


NOW = object()


class NullCost:
    """Cost hooks that charge nothing; used outside the simulator."""

    def txn_start(self, node_id):
        return ()

    def row(self, node_id, key, mode):
        return ()

    def log_update(self, node_id):
        return ()

    def log_force(self, node_id):
        return ()

    def log_append(self, node_id):
        return ()

    def release(self, node_id, keys):
        return ()

    def abort(self, node_id, n_writes):
        return ()

    def send(self, node_id):
        return ()

    def recv(self, node_id, n):
        return ()


NULL_COST = NullCost()


class Node:
    """Per-instance 2PC bookkeeping around a storage :class:`Instance`."""

    def __init__(self, instance: Instance):
        self.instance = instance
        self.id = instance.instance_id
        self.branches: dict[int, LocalTxn] = {}
        self.decisions: dict[int, DecisionValue] = {}
        self.coordinating: dict[int, GlobalTxn] = {}
        # aborts that overtook their branch's execution request
        self.tombstones: set[int] = set()

    def in_doubt(self) -> list[int]:
        return [g for g, t in self.branches.items() if t.state is TxnState.PREPARED]


def drain(gen: Generator) -> Any:
    """Run an effect generator that only yields :class:`Work`."""
    try:
        while True:
            eff = next(gen)
            if not isinstance(eff, Work):
                raise RuntimeError(f"unexpected effect {eff!r}")
    except StopIteration as stop:
        return stop.value


def _run_ops(txn: LocalTxn, op: Op, keys: Iterable[int], tag: int, cost,
             node_id: int) -> Generator:
    rows: dict[int, bytes] = {}
    mode = LockMode.SHARED if op is Op.READ else LockMode.EXCLUSIVE
    fn = (lambda old: next_payload(old, tag))
    for k in keys:
        yield from cost.row(node_id, k, mode if txn.uses_locks else None)
        if op is Op.READ:
            rows[k] = read_row(txn, k)
        else:
            rows[k] = transform_row(txn, k, fn)
            yield from cost.log_update(node_id)
    return rows


def _finish_abort(txn: LocalTxn, cost, node_id: int) -> Generator:
    keys = list(txn.locks)
    yield from cost.abort(node_id, len(txn.write_set))
    abort_local(txn)
    yield from cost.release(node_id, keys)


def _finish_commit(txn: LocalTxn, cost, node_id: int, force: bool = False
                   ) -> Generator:
    keys = list(txn.locks)
    if txn.write_set or force:
        yield from cost.log_force(node_id)
    commit_local(txn, force=force)
    yield from cost.release(node_id, keys)


# ---- participant side ------------------------------------------------------

def serve(node: Node, m: Message, cost=NULL_COST) -> Generator:
    """Handle one inbound request; returns the reply message (or None)."""
    yield from cost.recv(node.id, 1)
    reply = yield from _serve(node, m, cost)
    if reply is not None:
        yield from cost.send(node.id)
    return reply


def _serve(node: Node, m: Message, cost) -> Generator:
    gtid = m.global_txn_id
    if m.kind is MsgKind.EXEC_BRANCH:
        body: ExecBranch = m.body
        if gtid in node.tombstones:
            node.tombstones.discard(gtid)
            return _reply(m, MsgKind.BRANCH_RESULT, BranchResult(False))
        txn = begin(node.instance, gtid)
        node.branches[gtid] = txn
        try:
            rows = yield from _run_ops(txn, body.op, body.keys, body.tag, cost,
                                       node.id)
        except (LockConflict, StorageError):
            # a concurrent abort decision may already have rolled it back
            if node.branches.get(gtid) is txn:
                del node.branches[gtid]
                yield from _finish_abort(txn, cost, node.id)
            return _reply(m, MsgKind.BRANCH_RESULT, BranchResult(False))
        if node.branches.get(gtid) is not txn:
            return _reply(m, MsgKind.BRANCH_RESULT, BranchResult(False))
        payload = tuple(rows.items()) if body.op is Op.READ else ()
        return _reply(m, MsgKind.BRANCH_RESULT, BranchResult(True, payload))

    if m.kind is MsgKind.PREPARE:
        txn = node.branches.get(gtid)
        if txn is None:
            return _reply(m, MsgKind.VOTE, VoteValue.NO)
        if not txn.read_only and not txn.failed:
            yield from cost.log_force(node.id)
        keys = list(txn.locks)
        vote = prepare_local(txn)
        if vote is not Vote.YES:
            if node.branches.get(gtid) is txn:
                del node.branches[gtid]
                yield from cost.release(node.id, keys)
        return _reply(m, MsgKind.VOTE, _VOTE_WIRE[vote])

    if m.kind is MsgKind.DECISION:
        if m.body is DecisionValue.QUERY:
            d = node.decisions.get(gtid)
            if d is None and gtid in node.coordinating:
                # still undecided; the participant will ask again
                return None
            return _reply(m, MsgKind.DECISION, d or DecisionValue.ABORT)
        txn = node.branches.pop(gtid, None)
        if txn is None:
            # presumed abort: nothing known about this branch
            if m.body is DecisionValue.ABORT:
                node.tombstones.add(gtid)
            return _reply(m, MsgKind.ACK, DecisionValue.ABORT)
        if m.body is DecisionValue.COMMIT:
            yield from _finish_commit(txn, cost, node.id)
        else:
            yield from _finish_abort(txn, cost, node.id)
        return _reply(m, MsgKind.ACK, m.body)

    raise ValueError(f"{m.kind.name} is not a request")


_VOTE_WIRE = {Vote.YES: VoteValue.YES, Vote.YES_READ_ONLY: VoteValue.YES_READ_ONLY,
              Vote.NO: VoteValue.NO}


def _reply(m: Message, kind: MsgKind, body) -> Message:
    return Message(kind, m.global_txn_id, m.destination, m.origin, body)


def handle_message(node: Node, m: Message) -> Message | None:
    """Synchronous participant handler (no cost accounting)."""
    return drain(serve(node, m))


def query_in_doubt(node: Node, coordinator_of) -> list[Message]:
    """Decision queries for every prepared branch still awaiting a decision.

    ``coordinator_of`` maps a global txn id to its coordinating instance.
    """
    return [Message(MsgKind.DECISION, g, node.id, coordinator_of(g),
                    DecisionValue.QUERY) for g in node.in_doubt()]


# ---- coordinator side --------------------------------------------------------

def coordinate(node: Node, pm: PartitionMap, req: TxnRequest, gtid: int,
               cost=NULL_COST, timeout_ns: int = 1_000_000_000) -> Generator:
    """Execute ``req`` with ``node`` as origin and coordinator."""
    cls = classify(req, pm)
    keys = req.unique_keys()
    tag = gtid if req.op is Op.UPDATE else 0
    yield from cost.txn_start(node.id)

    if cls.kind is not SiteClass.DISTRIBUTED:
        txn = begin(node.instance)
        try:
            rows = yield from _run_ops(txn, req.op, keys, tag, cost, node.id)
        except LockConflict as exc:
            yield from _finish_abort(txn, cost, node.id)
            return TxnOutcome(False, gtid, cls.kind, reason=f"lock:{exc.key}",
                              participants=cls.participants)
        # every lock is held here: the transaction's serialization point
        lock_point = yield NOW
        yield from _finish_commit(txn, cost, node.id)
        return TxnOutcome(True, gtid, cls.kind, rows, serial_ts=lock_point,
                          participants=cls.participants)

    split: dict[int, list[int]] = {}
    for k in keys:
        split.setdefault(partition_of(pm, k), []).append(k)
    remote = sorted(p for p in cls.participants if p != node.id)
    g = GlobalTxn(gtid, node.id, cls.participants)
    node.coordinating[gtid] = g

    def outcome(ok, reason="", rows=None, ts=0):
        node.coordinating.pop(gtid, None)
        return TxnOutcome(ok, gtid, cls.kind, rows or {}, reason, ts,
                          cls.participants)

    def broadcast(kind, body, to):
        for p in to:
            yield from cost.send(node.id)
            yield Send(Message(kind, gtid, node.id, p, body))

    def abort_all(own, to, reason):
        g.decide(DecisionValue.ABORT)
        node.decisions[gtid] = DecisionValue.ABORT
        if own.state is TxnState.ACTIVE:
            yield from _finish_abort(own, cost, node.id)
        yield from broadcast(MsgKind.DECISION, DecisionValue.ABORT, to)
        return outcome(False, reason)

    # remote branches first so their work overlaps the local branch
    for p in remote:
        yield from cost.send(node.id)
        yield Send(Message(MsgKind.EXEC_BRANCH, gtid, node.id, p,
                           ExecBranch(req.op, tuple(split.get(p, ())), tag)))
    own = begin(node.instance, gtid)
    try:
        rows = yield from _run_ops(own, req.op, split.get(node.id, ()), tag,
                                   cost, node.id)
    except LockConflict as exc:
        return (yield from abort_all(own, remote, f"lock:{exc.key}"))

    results = yield Await(gtid, frozenset(remote), MsgKind.BRANCH_RESULT,
                          timeout_ns)
    yield from cost.recv(node.id, len(results))
    if len(results) < len(remote):
        return (yield from abort_all(own, remote, "timeout:exec"))
    failed = [p for p in remote if not results[p].body.ok]
    if failed:
        to = [p for p in remote if results[p].body.ok]
        return (yield from abort_all(own, to, f"branch:{failed[0]}"))
    for p in remote:
        rows.update(results[p].body.rows)
    lock_point = yield NOW

    g.advance(Phase.PREPARING)
    yield from broadcast(MsgKind.PREPARE, None, remote)
    votes = yield Await(gtid, frozenset(remote), MsgKind.VOTE, timeout_ns)
    yield from cost.recv(node.id, len(votes))
    for p, m in votes.items():
        g.votes[p] = m.body
    if len(votes) < len(remote) or any(m.body is VoteValue.NO
                                       for m in votes.values()):
        to = [p for p in remote if p not in votes or votes[p].body is VoteValue.YES]
        reason = "timeout:vote" if len(votes) < len(remote) else "vote:no"
        return (yield from abort_all(own, to, reason))

    yes = [p for p in remote if votes[p].body is VoteValue.YES]
    g.decide(DecisionValue.COMMIT)
    node.decisions[gtid] = DecisionValue.COMMIT
    if not yes:
        # every remote branch was read-only and has already finished
        yield from _finish_commit(own, cost, node.id)
        return outcome(True, rows=rows, ts=lock_point)
    yield from _finish_commit(own, cost, node.id, force=True)
    yield from broadcast(MsgKind.DECISION, DecisionValue.COMMIT, yes)
    acks = yield Await(gtid, frozenset(yes), MsgKind.ACK, timeout_ns)
    yield from cost.recv(node.id, len(acks))
    node.instance.wal.append(own.txn_id, RecordKind.END_DISTRIBUTED, gtid=gtid)
    yield from cost.log_append(node.id)
    return outcome(True, rows=rows, ts=lock_point)
