"""Threaded runtime for Real mode.

One OS thread per worker, pinned per the deployment's placement. Messages
travel over in-process channels; a worker waiting on replies keeps serving
its instance's inbound requests, so single-worker instances cannot
deadlock. Python threads share the GIL, so absolute numbers mostly reflect
interpreter overhead; the runtime exists to exercise the protocol on real
threads and real affinity.
"""
from __future__ import annotations

import os
import random
import threading
import time
from collections import defaultdict
from dataclasses import replace

from .deployment import Cluster, DeploymentConfig, deploy
from .sim import REPLY_KINDS
from .topology import apply_placement
from .transport import InProcessChannel, Message
from .txn import (NOW, Await, Category, Node, Send, Work, coordinate,
                  handle_message)
from .workload import WorkloadSource, WorkloadSpec

_POLL_S = 50e-6


class _Endpoint:
    def __init__(self, node: Node):
        self.node = node
        self.inbox = InProcessChannel(capacity=1 << 20)
        self.serve_lock = threading.Lock()
        self.cond = threading.Condition()
        self.replies: dict[int, list[Message]] = defaultdict(list)


class _Stats:
    def __init__(self):
        self.committed = 0
        self.aborted = 0
        self.latencies: list[int] = []
        self.time = {c: 0 for c in Category}


class RealRuntime:
    def __init__(self, cluster: Cluster, seed: int = 0,
                 timeout_s: float = 1.0):
        self.cluster = cluster
        self.pm = cluster.partition_map
        self.eps = [_Endpoint(Node(i)) for i in cluster.instances]
        self.timeout_ns = int(timeout_s * 1e9)
        self.stop = threading.Event()
        self._all_done = threading.Event()
        self._gtid = 0
        self._gtid_lock = threading.Lock()
        self.rng = random.Random(seed)

    def new_gtid(self) -> int:
        with self._gtid_lock:
            self._gtid += 1
            return self._gtid

    def deliver(self, m: Message) -> None:
        ep = self.eps[m.destination]
        if m.kind in REPLY_KINDS:
            with ep.cond:
                ep.replies[m.global_txn_id].append(m)
                ep.cond.notify_all()
        else:
            ep.inbox.send(m)

    def serve_one(self, ep: _Endpoint, timeout: float) -> bool:
        m = ep.inbox.recv(timeout=timeout)
        if m is None:
            return False
        with ep.serve_lock:
            reply = handle_message(ep.node, m)
        if reply is not None:
            self.deliver(reply)
        return True

    def _await(self, ep: _Endpoint, a: Await) -> dict[int, Message]:
        if a.gtid is None:
            # yield point (timeout 0) or a pause that keeps serving peers
            deadline = time.perf_counter() + a.timeout_ns / 1e9
            while True:
                while self.serve_one(ep, 0):
                    pass
                left = deadline - time.perf_counter()
                if left <= 0:
                    return {}
                self.serve_one(ep, min(left, _POLL_S))
        got: dict[int, Message] = {}
        deadline = time.perf_counter() + a.timeout_ns / 1e9
        while True:
            with ep.cond:
                box = ep.replies.get(a.gtid, [])
                keep = []
                for m in box:
                    if m.kind is a.kind and m.origin in a.expect:
                        got[m.origin] = m
                    else:
                        keep.append(m)
                if keep:
                    ep.replies[a.gtid] = keep
                else:
                    ep.replies.pop(a.gtid, None)
            if len(got) >= len(a.expect) or time.perf_counter() >= deadline:
                return got
            if not self.serve_one(ep, 0):
                with ep.cond:
                    if a.gtid not in ep.replies:
                        ep.cond.wait(_POLL_S)

    def run_txn(self, ep: _Endpoint, req, waited: list[int] | None = None):
        """Run one attempt; time spent awaiting replies is added to
        ``waited[0]``."""
        gtid = self.new_gtid()
        gen = coordinate(ep.node, self.pm, req, gtid, timeout_ns=self.timeout_ns)
        value = None
        try:
            while True:
                eff = gen.send(value)
                value = None
                if eff is NOW:
                    value = time.perf_counter_ns()
                elif type(eff) is Send:
                    self.deliver(eff.msg)
                elif type(eff) is Await:
                    t0 = time.perf_counter_ns()
                    value = self._await(ep, eff)
                    if waited is not None:
                        waited[0] += time.perf_counter_ns() - t0
                elif type(eff) is not Work:
                    raise RuntimeError(f"unknown effect {eff!r}")
        except StopIteration as stop:
            with ep.cond:
                ep.replies.pop(gtid, None)
            return stop.value

    def worker(self, ep: _Endpoint, source, wid, core, window, stats: _Stats):
        if core is not None:
            try:
                os.sched_setaffinity(0, {core})
            except (AttributeError, OSError):
                pass
        lo, hi = window
        rng = random.Random(wid)
        while not self.stop.is_set():
            self.serve_one(ep, 0)
            req = source(wid)
            start = time.perf_counter_ns()
            attempts = 0
            while not self.stop.is_set():
                t0 = time.perf_counter_ns()
                waited = [0]
                out = self.run_txn(ep, req, waited)
                now = time.perf_counter_ns()
                inside = lo <= now < hi
                if inside:
                    stats.time[Category.WORK] += now - t0 - waited[0]
                    stats.time[Category.COMM] += waited[0]
                if out.committed:
                    if inside:
                        stats.committed += 1
                        stats.latencies.append(now - start)
                    break
                if inside:
                    stats.aborted += 1
                attempts += 1
                pause = rng.uniform(0, 4e-6 * (1 << min(attempts, 5)))
                b0 = time.perf_counter_ns()
                self._await(ep, Await(None, frozenset(), None, int(pause * 1e9)))
                if inside:
                    stats.time[Category.LOCKWAIT] += time.perf_counter_ns() - b0
        # keep answering peers until everyone is done
        while not self._all_done.is_set():
            self.serve_one(ep, _POLL_S)


def run_real(dep: DeploymentConfig, wl: WorkloadSpec, warmup_s: float,
             measure_s: float, seed: int):
    """One repetition on OS threads; same return shape as the simulator path."""
    cluster = deploy(dep)
    # bind the cores (validates them against the host)
    apply_placement(cluster.placement, dep.topology, bindings={})
    rt = RealRuntime(cluster, seed)
    src = WorkloadSource(replace(wl, rng_seed=seed), cluster.partition_map,
                         dep.workers_per_instance)

    class _W:
        def __init__(self, node_id, index):
            self.node_id, self.index = node_id, index

    handles = {}
    threads, stats = [], []
    t_start = time.perf_counter_ns()
    lo = t_start + int(warmup_s * 1e9)
    hi = lo + int(measure_s * 1e9)
    for i in range(dep.n_instances):
        for j, core in enumerate(cluster.worker_cores(i)):
            wid = i * dep.workers_per_instance + j
            handles[wid] = _W(i, j)
            st = _Stats()
            stats.append((i, st))
            th = threading.Thread(
                target=rt.worker,
                args=(rt.eps[i], lambda w, h=handles: src(h[w]), wid, core,
                      (lo, hi), st),
                daemon=True)
            threads.append(th)
    for th in threads:
        th.start()
    time.sleep(max(0.0, (hi - time.perf_counter_ns()) / 1e9))
    rt.stop.set()
    time.sleep(0.01)
    rt._all_done.set()
    for th in threads:
        th.join(timeout=5)
    committed = [0] * dep.n_instances
    aborted = 0
    lat: list[int] = []
    tm = {c: 0 for c in Category}
    for i, st in stats:
        committed[i] += st.committed
        aborted += st.aborted
        lat.extend(st.latencies)
        for c, v in st.time.items():
            tm[c] += v
    cluster.shutdown()
    return committed, aborted, lat, tm
