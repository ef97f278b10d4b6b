import itertools
import os

import pytest
from hypothesis import given, strategies as st

from islandsdb.topology import (CapacityError, CommClass, Mode, PlacementPolicy,
                                Topology, apply_placement, comm_class,
                                place_workers)


def test_comm_class_examples():
    t = Topology(2, 4)
    assert comm_class(t, 0, 0) is CommClass.SAME_CORE
    assert comm_class(t, 0, 3) is CommClass.SAME_SOCKET
    assert comm_class(t, 0, 4) is CommClass.CROSS_SOCKET


def test_comm_class_rejects_bad_core():
    t = Topology(2, 4)
    with pytest.raises(ValueError):
        comm_class(t, 0, 8)
    with pytest.raises(ValueError):
        comm_class(t, -1, 0)


@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_comm_class_symmetric(s, c, data):
    t = Topology(s, c)
    a = data.draw(st.integers(0, t.total_cores - 1))
    b = data.draw(st.integers(0, t.total_cores - 1))
    assert comm_class(t, a, b) is comm_class(t, b, a)
    assert (comm_class(t, a, b) is CommClass.SAME_CORE) == (a == b)


def test_topology_invariants():
    t = Topology(3, 5)
    assert t.total_cores == 15
    assert list(t.cores_of(1)) == [5, 6, 7, 8, 9]
    with pytest.raises(ValueError):
        Topology(0, 4)
    with pytest.raises(ValueError):
        Topology(2, 2, sim_latency={CommClass.SAME_CORE: 0,
                                    CommClass.SAME_SOCKET: 600,
                                    CommClass.CROSS_SOCKET: 500})


def test_default_latency_order():
    t = Topology(2, 2)
    assert t.latency(0, 0) <= t.latency(0, 1) <= t.latency(0, 2)


def test_group_exact_fit():
    t = Topology(4, 6)
    p = place_workers(t, PlacementPolicy.GROUP, [6, 6, 6, 6])
    for g in range(4):
        assert {t.socket_of(c) for c in p.cores_of_group(g)} == {g}


def test_spread_distinct_sockets():
    t = Topology(4, 6)
    p = place_workers(t, PlacementPolicy.SPREAD, [4])
    assert len({t.socket_of(c) for c in p.cores_of_group(0)}) == 4


def test_mix_two_per_socket():
    t = Topology(4, 6)
    p = place_workers(t, PlacementPolicy.MIX, [8])
    counts = [0] * 4
    for c in p.cores_of_group(0):
        counts[t.socket_of(c)] += 1
    assert counts == [2, 2, 2, 2]


def test_mix_remainder_lowest_socket_first():
    t = Topology(4, 6)
    p = place_workers(t, PlacementPolicy.MIX, [6])
    counts = [0] * 4
    for c in p.cores_of_group(0):
        counts[t.socket_of(c)] += 1
    assert counts == [2, 2, 1, 1]


def test_unpinned_is_empty():
    p = place_workers(Topology(2, 2), PlacementPolicy.UNPINNED, [3])
    assert not p.pinned and dict(p.assignments) == {}


def test_capacity_error():
    with pytest.raises(CapacityError):
        place_workers(Topology(2, 2), PlacementPolicy.GROUP, [3, 2])


def _max_sq(caps, n):
    # best achievable sum of squared per-socket counts (brute force)
    best = -1
    for combo in itertools.product(*[range(c + 1) for c in caps]):
        if sum(combo) == n:
            best = max(best, sum(x * x for x in combo))
    return best


def _all_group_lists(total, max_groups=3):
    for k in range(1, max_groups + 1):
        for sizes in itertools.product(range(1, total + 1), repeat=k):
            if sum(sizes) <= total:
                yield list(sizes)


@pytest.mark.parametrize("sockets,cps", [(s, c) for s in range(1, 5)
                                          for c in range(1, 5)])
def test_placement_exhaustive(sockets, cps):
    t = Topology(sockets, cps)
    for groups in _all_group_lists(t.total_cores):
        for pol in (PlacementPolicy.GROUP, PlacementPolicy.SPREAD,
                    PlacementPolicy.MIX):
            p = place_workers(t, pol, groups)
            assert p == place_workers(t, pol, groups)  # pure
            cores = list(p.assignments.values())
            assert len(cores) == sum(groups) == len(set(cores))
            assert set(p.assignments) == {(g, w) for g, n in enumerate(groups)
                                          for w in range(n)}
        # group: minimal cross-socket pairs given the cores still free
        free = [cps] * sockets
        p = place_workers(t, PlacementPolicy.GROUP, groups)
        for g, n in enumerate(groups):
            counts = [0] * sockets
            for c in p.cores_of_group(g):
                counts[t.socket_of(c)] += 1
            assert sum(x * x for x in counts) == _max_sq(free, n)
            if n <= cps and max(free) >= n:
                assert max(counts) == n  # island property
            free = [f - c for f, c in zip(free, counts)]
        # spread: as many sockets as possible per group
        free = [cps] * sockets
        p = place_workers(t, PlacementPolicy.SPREAD, groups)
        for g, n in enumerate(groups):
            used = {t.socket_of(c) for c in p.cores_of_group(g)}
            assert len(used) == min(n, sum(1 for f in free if f))
            for c in p.cores_of_group(g):
                free[t.socket_of(c)] -= 1


def test_apply_placement_simulated():
    t = Topology(2, 2)
    p = place_workers(t, PlacementPolicy.GROUP, [2, 2])
    assert apply_placement(p, t).ok


def test_apply_placement_real_checks_detected_cores():
    n = os.cpu_count() or 1
    big = Topology(1, n + 1, Mode.REAL)
    p = place_workers(big, PlacementPolicy.GROUP, [n + 1])
    with pytest.raises(ValueError):
        apply_placement(p, big)
    ok = Topology(1, n, Mode.REAL)
    p = place_workers(ok, PlacementPolicy.GROUP, [1])
    assert apply_placement(p, ok, {(0, 0): 0}).ok
    if hasattr(os, "sched_setaffinity"):
        os.sched_setaffinity(0, set(range(n)))


def test_detect():
    t = Topology.detect()
    assert t.mode is Mode.REAL
    assert t.total_cores == (os.cpu_count() or 1)
