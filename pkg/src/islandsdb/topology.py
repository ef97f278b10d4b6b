"""Machine topology model and worker placement.

Cores are numbered contiguously per socket: socket ``i`` owns cores
``[i * cores_per_socket, (i + 1) * cores_per_socket)``.
"""
from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

log = logging.getLogger(__name__)


class CommClass(enum.IntEnum):
    SAME_CORE = 0
    SAME_SOCKET = 1
    CROSS_SOCKET = 2


class Mode(enum.Enum):
    REAL = "real"
    SIMULATED = "simulated"


class PlacementPolicy(enum.Enum):
    SPREAD = "spread"
    GROUP = "group"
    MIX = "mix"
    UNPINNED = "unpinned"


class CapacityError(ValueError):
    """More workers requested than the topology has cores."""


DEFAULT_SIM_LATENCY_NS = {
    CommClass.SAME_CORE: 0,
    CommClass.SAME_SOCKET: 100,
    CommClass.CROSS_SOCKET: 500,
}


@dataclass(frozen=True)
class Topology:
    sockets: int
    cores_per_socket: int
    mode: Mode = Mode.SIMULATED
    sim_latency: Mapping[CommClass, int] = field(
        default_factory=lambda: dict(DEFAULT_SIM_LATENCY_NS))

    def __post_init__(self):
        if self.sockets < 1 or self.cores_per_socket < 1:
            raise ValueError("sockets and cores_per_socket must be >= 1")
        lat = {CommClass(k): int(v) for k, v in self.sim_latency.items()}
        if self.mode is Mode.SIMULATED:
            missing = set(CommClass) - set(lat)
            if missing:
                raise ValueError(f"sim_latency missing classes: {sorted(missing)}")
            if not (lat[CommClass.SAME_CORE] <= lat[CommClass.SAME_SOCKET]
                    <= lat[CommClass.CROSS_SOCKET]):
                raise ValueError("sim_latency must be monotone: "
                                 "same_core <= same_socket <= cross_socket")
        object.__setattr__(self, "sim_latency", MappingProxyType(lat))

    @property
    def total_cores(self) -> int:
        return self.sockets * self.cores_per_socket

    def socket_of(self, core: int) -> int:
        self._check_core(core)
        return core // self.cores_per_socket

    def cores_of(self, socket: int) -> range:
        base = socket * self.cores_per_socket
        return range(base, base + self.cores_per_socket)

    def latency(self, a: int, b: int) -> int:
        return self.sim_latency.get(comm_class(self, a, b), 0)

    def _check_core(self, core: int) -> None:
        if not 0 <= core < self.total_cores:
            raise ValueError(f"core id {core} outside [0, {self.total_cores})")

    @classmethod
    def detect(cls) -> "Topology":
        """Best-effort view of the host as a Real-mode topology."""
        n = os.cpu_count() or 1
        sockets = _count_sockets() or 1
        if n % sockets:
            sockets = 1
        return cls(sockets, n // sockets, Mode.REAL)


def _count_sockets() -> int | None:
    try:
        ids = set()
        base = "/sys/devices/system/cpu"
        for name in os.listdir(base):
            path = os.path.join(base, name, "topology", "physical_package_id")
            if name.startswith("cpu") and os.path.exists(path):
                with open(path) as f:
                    ids.add(f.read().strip())
        return len(ids) or None
    except OSError:
        return None


def comm_class(t: Topology, a: int, b: int) -> CommClass:
    t._check_core(a)
    t._check_core(b)
    if a == b:
        return CommClass.SAME_CORE
    if a // t.cores_per_socket == b // t.cores_per_socket:
        return CommClass.SAME_SOCKET
    return CommClass.CROSS_SOCKET


WorkerId = tuple  # (group index, worker index within group)


@dataclass(frozen=True)
class Placement:
    """Worker -> core map. Empty for unpinned placements."""

    policy: PlacementPolicy
    groups: tuple[int, ...]
    assignments: Mapping[WorkerId, int]

    @property
    def pinned(self) -> bool:
        return self.policy is not PlacementPolicy.UNPINNED

    def cores_of_group(self, g: int) -> list[int]:
        return [self.assignments[(g, w)] for w in range(self.groups[g])]

    def core_of(self, group: int, worker: int) -> int | None:
        return self.assignments.get((group, worker))


def place_workers(t: Topology, policy: PlacementPolicy,
                  groups: Sequence[int]) -> Placement:
    """Assign every worker of every group to a distinct core.

    Group packs each group onto the fewest sockets, filling free cores in
    socket order. Spread deals a group's workers round-robin over sockets,
    Mix divides a group evenly across all sockets (remainder to the lowest
    sockets). Unpinned returns an empty map.
    """
    groups = tuple(int(g) for g in groups)
    if any(g < 0 for g in groups):
        raise ValueError("group sizes must be non-negative")
    if sum(groups) > t.total_cores:
        raise CapacityError(
            f"{sum(groups)} workers requested, {t.total_cores} cores available")
    if policy is PlacementPolicy.UNPINNED:
        return Placement(policy, groups, MappingProxyType({}))

    free = [list(t.cores_of(s)) for s in range(t.sockets)]
    out: dict[WorkerId, int] = {}
    if policy is PlacementPolicy.GROUP:
        for g, size in enumerate(groups):
            for w, core in enumerate(_take_grouped(free, size, t.cores_per_socket)):
                out[(g, w)] = core
    else:
        start = 0
        for g, size in enumerate(groups):
            if policy is PlacementPolicy.SPREAD:
                sockets = _round_robin(free, size, start)
                start = (start + size) % t.sockets
            else:
                sockets = _even_split(free, size)
            for w, s in enumerate(sockets):
                out[(g, w)] = free[s].pop(0)
    return Placement(policy, groups, MappingProxyType(out))


def _take_grouped(free: list[list[int]], size: int, cps: int) -> list[int]:
    taken: list[int] = []
    need = size
    # whole sockets first when the group spans several, then the socket
    # whose free count fits the remainder most tightly
    while need:
        empty = [s for s, c in enumerate(free) if len(c) == cps]
        if need >= cps and empty:
            s = empty[0]
        else:
            fits = [s for s, c in enumerate(free) if len(c) >= need]
            if fits:
                s = min(fits, key=lambda s: (len(free[s]), s))
            else:
                s = max(range(len(free)), key=lambda s: (len(free[s]), -s))
        n = min(need, len(free[s]))
        taken.extend(free[s][:n])
        del free[s][:n]
        need -= n
    return taken


def _round_robin(free: list[list[int]], size: int, start: int) -> list[int]:
    out = []
    s = start
    n = len(free)
    while len(out) < size:
        for _ in range(n):
            cand = s % n
            s += 1
            if free[cand] and out.count(cand) < len(free[cand]):
                out.append(cand)
                break
    return out


def _even_split(free: list[list[int]], size: int) -> list[int]:
    n = len(free)
    share = [size // n + (1 if s < size % n else 0) for s in range(n)]
    # a socket short of free cores passes its overflow to the next ones
    overflow = 0
    for s in range(n):
        share[s] += overflow
        overflow = max(0, share[s] - len(free[s]))
        share[s] -= overflow
    s = 0
    while overflow:
        if len(free[s]) > share[s]:
            share[s] += 1
            overflow -= 1
        s = (s + 1) % n
    out = []
    for s in range(n):
        out.extend([s] * share[s])
    return out


@dataclass
class PlatformResult:
    ok: bool
    applied: int
    warning: str | None = None


def apply_placement(p: Placement, t: Topology,
                    bindings: Mapping[WorkerId, int] | None = None
                    ) -> PlatformResult:
    """Bind workers to their cores.

    ``bindings`` maps worker ids to OS thread ids (0 = calling thread); it
    is only consulted in Real mode. Simulated mode only validates.
    """
    for core in p.assignments.values():
        t._check_core(core)
    if t.mode is Mode.SIMULATED or not p.pinned:
        return PlatformResult(True, 0)
    detected = os.cpu_count() or 1
    for core in p.assignments.values():
        if core >= detected:
            raise ValueError(f"core id {core} >= detected cores ({detected})")
    if not hasattr(os, "sched_setaffinity"):
        msg = "platform lacks sched_setaffinity; running unpinned"
        log.warning(msg)
        return PlatformResult(True, 0, msg)
    applied = 0
    for wid, tid in (bindings or {}).items():
        core = p.assignments.get(wid)
        if core is None:
            continue
        try:
            os.sched_setaffinity(tid, {core})
            applied += 1
        except OSError as exc:
            msg = f"affinity for worker {wid} failed: {exc}"
            log.warning(msg)
            return PlatformResult(True, applied, msg)
    return PlatformResult(True, applied)
