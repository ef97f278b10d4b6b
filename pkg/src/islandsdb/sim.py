"""Discrete-event runtime for Simulated mode.

Every worker is a stack of effect generators (see :mod:`islandsdb.txn`)
advanced in logical nanoseconds. Costs come from :class:`CostModel`; cache
line transfers between cores are charged from the topology's latency table,
so placement and instance size show up in throughput the same way they do
on real multisocket hardware, but deterministically.
"""
from __future__ import annotations

import heapq
import itertools
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator

from .deployment import Cluster
from .topology import PlacementPolicy
from .storage import TxnState
from .transport import DecisionValue, Message, MsgKind, SimChannel, Trace, VoteValue
from .txn import (NOW, Await, Category, Node, Send, TxnOutcome, TxnRequest,
                  Work, coordinate, serve)

REPLY_KINDS = frozenset({MsgKind.BRANCH_RESULT, MsgKind.VOTE, MsgKind.ACK})
NEVER = 1 << 62


@dataclass(frozen=True)
class CostModel:
    """CPU and synchronization costs in nanoseconds.

    Only relative magnitudes matter; the defaults make one 10-row local
    transaction cost roughly 20 us on an uncontended core.
    """

    txn_overhead: int = 4000
    row_work: int = 1000
    lock_op: int = 300
    latch_hold: int = 100
    log_record: int = 200
    log_insert: int = 300
    log_flush: int = 2500
    abort_overhead: int = 1000
    undo_row: int = 300
    msg_send: int = 400
    msg_recv: int = 400
    backoff: int = 4000
    # chance per transaction that an unpinned worker migrates
    migrate_prob: float = 0.05


@dataclass
class Faults:
    vote_delay_prob: float = 0.0
    vote_delay_ns: int = 0


@dataclass
class _Latch:
    free_at: int = 0
    last_core: int | None = None


class _NodeState:
    def __init__(self, node: Node):
        self.node = node
        self.requests: deque[Message] = deque()
        self.row_core: dict[int, int] = {}
        self.latches: dict[int, _Latch] = {}
        self.log_tail = _Latch()
        self.waiting: dict[int, "Worker"] = {}
        self.replies: dict[int, list[Message]] = {}
        self.committed = 0


@dataclass
class WorkerStats:
    committed: int = 0
    aborted: int = 0
    distributed: int = 0
    latencies: list[int] = field(default_factory=list)
    time: dict[Category, int] = field(
        default_factory=lambda: {c: 0 for c in Category})


class Worker:
    def __init__(self, sim: "Sim", node_id: int, index: int, core: int | None):
        self.sim = sim
        self.node_id = node_id
        self.index = index
        self.core = core
        # (generator, is_handler) frames; handlers sit above a blocked frame
        self.stack: list[tuple[object, bool]] = []
        self.jobs: deque = deque()
        self.awaiting: Await | None = None
        self.got: dict[int, Message] = {}
        self.timed_out = False
        self.blocked_since: int | None = 0
        self.timer = 0
        self.stats = WorkerStats()
        self.cost = WorkerCost(sim, self)

    @property
    def name(self) -> str:
        return f"w{self.node_id}.{self.index}"

    @property
    def in_handler(self) -> bool:
        return bool(self.stack) and self.stack[-1][1]


class WorkerCost:
    """Cost hooks bound to one worker (its core is the requesting core)."""

    def __init__(self, sim: "Sim", worker: Worker):
        self.sim = sim
        self.w = worker
        self.m = sim.costs

    def _xfer(self, last: int | None) -> int:
        core = self.w.core
        if last is None or core is None or last == core:
            return 0
        return self.sim.topology.latency(core, last)

    def _latch(self, latch: _Latch, hold: int) -> Iterator[Work]:
        now = self.sim.now
        start = latch.free_at if latch.free_at > now else now
        busy = hold + self._xfer(latch.last_core)
        latch.free_at = start + busy
        latch.last_core = self.w.core
        if start > now:
            yield Work(Category.LOCKWAIT, start - now)
        yield Work(Category.WORK, busy)

    @staticmethod
    def _latch_of(st: "_NodeState", key: int) -> _Latch:
        latch = st.latches.get(key)
        if latch is None:
            latch = st.latches[key] = _Latch()
        return latch

    def txn_start(self, node_id):
        yield Work(Category.WORK, self.m.txn_overhead)

    def row(self, node_id, key, mode):
        st = self.sim.states[node_id]
        work = self.m.row_work + self._xfer(st.row_core.get(key))
        st.row_core[key] = self.w.core
        if mode is not None:
            yield from self._latch(self._latch_of(st, key), self.m.latch_hold)
            work += self.m.lock_op
        yield Work(Category.WORK, work)

    def release(self, node_id, keys):
        st = self.sim.states[node_id]
        for key in keys:
            yield from self._latch(self._latch_of(st, key), self.m.latch_hold)

    def log_update(self, node_id):
        yield Work(Category.LOG, self.m.log_record)

    def log_append(self, node_id):
        tail = self.sim.states[node_id].log_tail
        for w in self._latch(tail, self.m.log_insert):
            yield Work(Category.LOG, w.ns)

    def log_force(self, node_id):
        yield from self.log_append(node_id)
        yield Work(Category.LOG, self.m.log_flush)

    def abort(self, node_id, n_writes):
        yield Work(Category.WORK, self.m.abort_overhead + n_writes * self.m.undo_row)

    def send(self, node_id):
        yield Work(Category.COMM, self.m.msg_send)

    def recv(self, node_id, n):
        if n:
            yield Work(Category.COMM, n * self.m.msg_recv)


RequestSource = Callable[[Worker], "TxnRequest | None"]


class Sim:
    """Runs workers of a deployed cluster against a request source.

    ``source(worker)`` returns the next request for that worker's instance,
    or None when the worker has no more client work. Client work also stops
    at ``stop_at``; workers keep serving remote requests until the event
    queue drains.
    """

    def __init__(self, cluster: Cluster, source: RequestSource | None = None, *,
                 costs: CostModel | None = None, seed: int = 0,
                 window: tuple[int, int] = (0, NEVER), stop_at: int = NEVER,
                 timeout_ns: int = 1_000_000_000, faults: Faults | None = None,
                 record_history: bool = False, trace: bool = False):
        self.cluster = cluster
        self.topology = cluster.topology
        self.pm = cluster.partition_map
        self.costs = costs or CostModel()
        self.rng = random.Random(seed)
        self.window = window
        self.stop_at = stop_at
        self.timeout_ns = timeout_ns
        self.faults = faults or Faults()
        self.source = source
        self.now = 0
        self._heap: list = []
        self._seq = itertools.count()
        self._gtid = itertools.count(1)
        self.nodes = [Node(inst) for inst in cluster.instances]
        self.states = [_NodeState(n) for n in self.nodes]
        n = len(self.nodes)
        self.channels = {(a, b): SimChannel(0) for a in range(n) for b in range(n)
                         if a != b}
        self.trace = Trace()
        self.trace.enabled = trace
        self.dropped = 0
        self.queries = 0
        self.history: list[tuple[int, int, TxnRequest, TxnOutcome]] | None = (
            [] if record_history else None)
        self.outcomes: list[TxnOutcome] = []
        self.coordinator_of: dict[int, int] = {}
        self.workers: list[Worker] = []
        unpinned = cluster.placement.policy is PlacementPolicy.UNPINNED
        free = list(range(self.topology.total_cores))
        if unpinned:
            self.rng.shuffle(free)
        for i in range(n):
            for j, core in enumerate(cluster.worker_cores(i)):
                if core is None:
                    core = free.pop() if free else self.rng.randrange(
                        self.topology.total_cores)
                self.workers.append(Worker(self, i, j, core))
        self.unpinned = unpinned
        self.by_node = [[w for w in self.workers if w.node_id == i]
                        for i in range(n)]

    # ---- public -----------------------------------------------------------

    def run(self, until: int = NEVER) -> None:
        if self.source is not None:
            for w in self.workers:
                self._push(0, self._start, w, self._client(w))
        self._loop(until)

    def submit(self, req: TxnRequest, at: int | None = None, worker: int = 0
               ) -> list[TxnOutcome]:
        """Queue a single transaction on a worker of ``req.origin``."""
        w = self.by_node[req.origin][worker]
        box: list[TxnOutcome] = []

        def one():
            out = yield from self._attempt(w, req)
            box.append(out)

        t = self.now if at is None else at
        self._push(t, self._start, w, one())
        return box

    def execute(self, req: TxnRequest) -> TxnOutcome:
        box = self.submit(req)
        self._loop(NEVER)
        return box[0]

    def new_gtid(self) -> int:
        return next(self._gtid)

    # ---- event loop -------------------------------------------------------

    def _push(self, t, fn, *args):
        heapq.heappush(self._heap, (t, next(self._seq), fn, args))

    def _loop(self, until: int) -> None:
        heap = self._heap
        while heap:
            t = heap[0][0]
            if t > until:
                break
            _, _, fn, args = heapq.heappop(heap)
            if fn == self._timeout and args[1] != args[0].timer:
                continue
            self.now = t
            fn(*args)

    def _start(self, w: Worker, gen) -> None:
        w.jobs.append(gen)
        if w.blocked_since is not None and not w.stack:
            self._wake(w)

    def _resume(self, w: Worker, value) -> None:
        self._step(w, value)

    def _account(self, w: Worker, cat: Category, t0: int, t1: int) -> None:
        lo, hi = self.window
        a = t0 if t0 > lo else lo
        b = t1 if t1 < hi else hi
        if b > a:
            w.stats.time[cat] += b - a

    def _step(self, w: Worker, value) -> None:
        while True:
            if not w.stack:
                value = self._resume_point(w)
                if value is _BLOCKED:
                    return
                continue
            gen, is_handler = w.stack[-1]
            try:
                eff = gen.send(value)
            except StopIteration as stop:
                w.stack.pop()
                if is_handler:
                    if stop.value is not None:
                        self._send(w, stop.value)
                    value = self._resume_point(w)
                    if value is _BLOCKED:
                        return
                else:
                    value = None
                continue
            value = None
            cls = type(eff)
            if cls is Work:
                if eff.ns <= 0:
                    continue
                self._account(w, eff.category, self.now, self.now + eff.ns)
                self._push(self.now + eff.ns, self._resume, w, None)
                return
            if cls is Send:
                self._send(w, eff.msg)
                continue
            if eff is NOW:
                value = self.now
                continue
            if cls is Await:
                w.awaiting = eff
                w.got = {}
                w.timed_out = False
                w.timer += 1
                if 0 < eff.timeout_ns < NEVER:
                    self._push(self.now + eff.timeout_ns, self._timeout, w, w.timer)
                value = self._resume_point(w)
                if value is _BLOCKED:
                    return
                continue
            raise RuntimeError(f"unknown effect {eff!r}")

    # ---- blocking ---------------------------------------------------------

    def _resume_point(self, w: Worker):
        """Decide what a worker with no running frame does next.

        Returns the value to send into the top frame, or _BLOCKED when the
        worker must wait for an external event.
        """
        a = w.awaiting
        if a is not None:
            if a.gtid is not None:
                self._collect(w)
                if len(w.got) >= len(a.expect):
                    return self._finish_await(w)
            if w.timed_out:
                return self._finish_await(w)
        st = self.states[w.node_id]
        if st.requests:
            self._unblock(w)
            m = st.requests.popleft()
            w.stack.append((serve(st.node, m, w.cost), True))
            return None
        if a is not None and a.gtid is None and a.timeout_ns == 0:
            return self._finish_await(w)
        if a is None and not w.stack:
            if w.jobs:
                self._unblock(w)
                w.stack.append((w.jobs.popleft(), False))
                return None
        if w.blocked_since is None:
            w.blocked_since = self.now
        return _BLOCKED

    def _finish_await(self, w: Worker):
        self._unblock(w)
        got = w.got
        w.awaiting = None
        w.got = {}
        w.timed_out = False
        w.timer += 1
        return got

    def _unblock(self, w: Worker) -> None:
        if w.blocked_since is None:
            return
        a = w.awaiting
        if a is not None:
            cat = Category.COMM if a.gtid is not None else Category.LOCKWAIT
            self._account(w, cat, w.blocked_since, self.now)
        w.blocked_since = None

    def _wake(self, w: Worker) -> None:
        """External event for a worker that may be blocked."""
        if w.blocked_since is None or w.in_handler:
            return
        value = self._resume_point(w)
        if value is not _BLOCKED:
            self._step(w, value)

    def _collect(self, w: Worker) -> None:
        a = w.awaiting
        box = self.states[w.node_id].replies.get(a.gtid)
        if not box:
            return
        keep = []
        for m in box:
            if m.kind is a.kind and m.origin in a.expect:
                w.got[m.origin] = m
            elif _kind_rank(m.kind) > _kind_rank(a.kind):
                keep.append(m)
            else:
                self.dropped += 1
        box[:] = keep

    def _timeout(self, w: Worker, token: int) -> None:
        if token != w.timer or w.awaiting is None:
            return
        w.timed_out = True
        self._wake(w)

    # ---- messaging --------------------------------------------------------

    def _send(self, w: Worker, m: Message) -> None:
        ch = self.channels[(m.origin, m.destination)]
        lat = 0
        dest = self.by_node[m.destination][0].core
        if w.core is not None and dest is not None:
            lat = self.topology.latency(w.core, dest)
        extra = 0
        f = self.faults
        if (m.kind is MsgKind.VOTE and f.vote_delay_prob
                and self.rng.random() < f.vote_delay_prob):
            extra = f.vote_delay_ns
        at = ch.send(m, self.now, lat + extra)
        self.trace.record(self.now, "send", m)
        self._push(at, self._deliver, ch)
        if m.kind is MsgKind.VOTE and m.body is VoteValue.YES:
            self._push(self.now + self.timeout_ns, self._check_in_doubt,
                       m.origin, m.global_txn_id, m.destination)

    def _check_in_doubt(self, part: int, gtid: int, coord: int) -> None:
        """A prepared branch that has not heard a decision asks for it."""
        txn = self.nodes[part].branches.get(gtid)
        if txn is None or txn.state is not TxnState.PREPARED:
            return
        self.queries += 1
        self._send(self.by_node[part][0],
                   Message(MsgKind.DECISION, gtid, part, coord, DecisionValue.QUERY))
        self._push(self.now + self.timeout_ns, self._check_in_doubt, part, gtid, coord)

    def _deliver(self, ch: SimChannel) -> None:
        m = ch.recv(self.now)
        self.trace.record(self.now, "recv", m)
        st = self.states[m.destination]
        if m.kind in REPLY_KINDS:
            w = st.waiting.get(m.global_txn_id)
            if w is None:
                self.dropped += 1
                return
            st.replies.setdefault(m.global_txn_id, []).append(m)
            a = w.awaiting
            if a is not None and a.gtid == m.global_txn_id:
                self._wake(w)
            return
        st.requests.append(m)
        for cand in self.by_node[m.destination]:
            if cand.blocked_since is not None and not cand.in_handler:
                self._wake(cand)
                break

    # ---- client driver ------------------------------------------------------

    def _attempt(self, w: Worker, req: TxnRequest):
        gtid = self.new_gtid()
        st = self.states[w.node_id]
        st.waiting[gtid] = w
        self.coordinator_of[gtid] = w.node_id
        if self.unpinned and self.rng.random() < self.costs.migrate_prob:
            w.core = self.rng.randrange(self.topology.total_cores)
        try:
            out = yield from coordinate(st.node, self.pm, req, gtid, w.cost,
                                        self.timeout_ns)
        finally:
            st.waiting.pop(gtid, None)
            st.replies.pop(gtid, None)
        self.outcomes.append(out)
        if out.committed:
            st.committed += 1
            if self.history is not None:
                self.history.append((out.serial_ts, gtid, req, out))
        return out

    def _client(self, w: Worker):
        lo, hi = self.window
        while True:
            yield Await(None, frozenset(), None, 0)
            if self.now >= self.stop_at:
                return
            req = self.source(w)
            if req is None:
                return
            start = self.now
            attempts = 0
            while True:
                out = yield from self._attempt(w, req)
                in_window = lo <= self.now < hi
                if out.committed:
                    if in_window:
                        w.stats.committed += 1
                        w.stats.latencies.append(self.now - start)
                        if out.kind.value == "distributed":
                            w.stats.distributed += 1
                    break
                if in_window:
                    w.stats.aborted += 1
                attempts += 1
                if self.now >= self.stop_at:
                    return
                cap = self.costs.backoff << min(attempts - 1, 4)
                yield Await(None, frozenset(), None, self.rng.randint(1, cap))


class _Blocked:
    def __repr__(self):
        return "<blocked>"


_BLOCKED = _Blocked()


def _kind_rank(kind: MsgKind | None) -> int:
    return {MsgKind.BRANCH_RESULT: 0, MsgKind.VOTE: 1, MsgKind.ACK: 2}.get(kind, -1)


def execute(req: TxnRequest, cluster: Cluster, **sim_kwargs) -> TxnOutcome:
    """Run one transaction to completion on an otherwise idle cluster."""
    return Sim(cluster, **sim_kwargs).execute(req)
