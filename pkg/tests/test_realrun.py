"""Real-mode runtime: OS threads, in-process channels, wall-clock time."""
import random
import threading

import pytest

from islandsdb.deployment import DeploymentConfig
from islandsdb.harness import ExperimentSpec, run_experiment
from islandsdb.realrun import RealRuntime
from islandsdb.topology import Mode, PlacementPolicy, Topology
from islandsdb.transport import Op
from islandsdb.txn import Await, TxnRequest
from islandsdb.workload import WorkloadSpec

from conftest import make_cluster
from oracles import serial_replay_violations, wal_replay_violations


def test_real_experiment_on_host():
    t = Topology.detect()
    dep = DeploymentConfig(1, 1, 1000, PlacementPolicy.GROUP, t)
    wl = WorkloadSpec(rows_per_txn=4, total_rows=1000, rng_seed=3)
    m = run_experiment(ExperimentSpec((dep,), wl, 0.01, 0.05, 1))
    assert m.throughput > 0 and m.committed == m.committed_by_instance[0]
    assert sum(m.breakdown.values()) == pytest.approx(1.0, abs=0.01)


def test_real_unpinned_multi_instance():
    t = Topology(1, 4, Mode.REAL)
    dep = DeploymentConfig(2, 2, 400, PlacementPolicy.UNPINNED, t)
    wl = WorkloadSpec(rows_per_txn=2, total_rows=400, pct_multisite=50)
    m = run_experiment(ExperimentSpec((dep,), wl, 0.005, 0.03, 1))
    assert all(c > 0 for c in m.committed_by_instance)
    assert m.breakdown["comm"] > 0


def test_pinning_beyond_host_fails():
    t = Topology.detect()
    big = Topology(t.sockets, t.cores_per_socket + 1, Mode.REAL)
    dep = DeploymentConfig(1, big.total_cores, 100, PlacementPolicy.GROUP, big)
    with pytest.raises(Exception):
        run_experiment(ExperimentSpec((dep,), WorkloadSpec(rows_per_txn=1,
                                                           total_rows=100), 0, 0.01, 1))


def test_threaded_runs_are_serializable():
    cl = make_cluster(2, 2, 64)
    rt = RealRuntime(cl, timeout_s=0.5)
    pm = cl.partition_map
    history, lock = [], threading.Lock()
    done = threading.Event()

    def client(node, seed):
        rng = random.Random(seed)
        ep = rt.eps[node]
        lo, hi = pm.range_of(node)
        for _ in range(60):
            n = rng.randint(1, 3)
            if rng.random() < 0.5:
                keys = tuple(rng.randrange(64) for _ in range(n))
            else:
                keys = tuple(rng.randrange(lo, hi) for _ in range(n))
            req = TxnRequest(rng.choice([Op.READ, Op.UPDATE]), keys, node)
            while True:
                out = rt.run_txn(ep, req)
                if out.committed:
                    with lock:
                        history.append((out.serial_ts, out.gtid, req, out))
                    break
                rt._await(ep, _pause(rng))
        while not done.is_set():
            rt.serve_one(ep, 0.0005)

    threads = [threading.Thread(target=client, args=(i % 2, i)) for i in range(4)]
    for th in threads:
        th.start()
    while sum(1 for _ in history) < 240 and any(th.is_alive() for th in threads):
        threads[0].join(0.01)
    done.set()
    for th in threads:
        th.join(10)
    assert len(history) == 240
    assert serial_replay_violations(cl, history) == []
    assert wal_replay_violations(cl) == []


def _pause(rng):
    return Await(None, frozenset(), None, rng.randint(1_000, 50_000))
