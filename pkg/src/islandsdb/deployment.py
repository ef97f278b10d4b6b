"""Range partitioning and cluster construction for <N>ISL configurations."""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import BinaryIO, Callable

from .storage import Instance
from .topology import (CapacityError, Mode, Placement, PlacementPolicy,
                       Topology, apply_placement, place_workers)


@dataclass(frozen=True)
class DeploymentConfig:
    n_instances: int
    workers_per_instance: int
    total_rows: int
    placement_policy: PlacementPolicy = PlacementPolicy.GROUP
    topology: Topology = field(default_factory=lambda: Topology(4, 4))

    def __post_init__(self):
        if self.n_instances < 1 or self.workers_per_instance < 1:
            raise ValueError("n_instances and workers_per_instance must be >= 1")
        if self.total_rows < self.n_instances:
            raise ValueError("total_rows must be >= n_instances")
        if self.n_instances * self.workers_per_instance > self.topology.total_cores:
            raise CapacityError(
                f"{self.n_instances}x{self.workers_per_instance} workers exceed "
                f"{self.topology.total_cores} cores")

    @property
    def label(self) -> str:
        return f"{self.n_instances}ISL"

    @property
    def active_cores(self) -> int:
        return self.n_instances * self.workers_per_instance


@dataclass(frozen=True)
class PartitionMap:
    ranges: tuple[tuple[int, int, int], ...]  # (instance_id, lo, hi)

    def __post_init__(self):
        object.__setattr__(self, "_los", [lo for _, lo, _ in self.ranges])

    @property
    def total_rows(self) -> int:
        return self.ranges[-1][2]

    @property
    def n_instances(self) -> int:
        return len(self.ranges)

    def range_of(self, instance_id: int) -> tuple[int, int]:
        _, lo, hi = self.ranges[instance_id]
        return lo, hi

    def partition_of(self, key: int) -> int:
        return partition_of(self, key)


def make_partition_map(total_rows: int, n_instances: int) -> PartitionMap:
    """Equal contiguous ranges; the first ``total_rows % n`` get one extra key."""
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    if total_rows < n_instances:
        raise ValueError("total_rows must be >= n_instances")
    base, extra = divmod(total_rows, n_instances)
    ranges = []
    lo = 0
    for i in range(n_instances):
        hi = lo + base + (1 if i < extra else 0)
        ranges.append((i, lo, hi))
        lo = hi
    return PartitionMap(tuple(ranges))


def partition_of(pm: PartitionMap, key: int) -> int:
    if not 0 <= key < pm.total_rows:
        raise ValueError(f"key {key} outside [0, {pm.total_rows})")
    return bisect.bisect_right(pm._los, key) - 1


class Cluster:
    """A deployed configuration: loaded instances plus their placement.

    Immutable after :func:`deploy` returns, except for instance contents.
    The transaction runtime (channels, dispatch state) is attached by
    :mod:`islandsdb.sim`.
    """

    def __init__(self, cfg: DeploymentConfig, pm: PartitionMap,
                 instances: list[Instance], placement: Placement):
        self.config = cfg
        self.topology = cfg.topology
        self.partition_map = pm
        self.instances = instances
        self.placement = placement

    @property
    def label(self) -> str:
        return self.config.label

    def worker_cores(self, instance_id: int) -> list[int | None]:
        w = self.config.workers_per_instance
        return [self.placement.core_of(instance_id, i) for i in range(w)]

    def home_core(self, instance_id: int) -> int | None:
        cores = self.worker_cores(instance_id)
        return cores[0] if cores else None

    def total_rows_loaded(self) -> int:
        return sum(len(i.table) for i in self.instances)

    def shutdown(self) -> None:
        for inst in self.instances:
            inst.shutdown()


def deploy(cfg: DeploymentConfig,
           log_sink_factory: Callable[[int], BinaryIO | None] | None = None
           ) -> Cluster:
    """Partition, load and place a configuration.

    Single-worker instances run with locking disabled.
    """
    pm = make_partition_map(cfg.total_rows, cfg.n_instances)
    placement = place_workers(cfg.topology, cfg.placement_policy,
                              [cfg.workers_per_instance] * cfg.n_instances)
    if cfg.topology.mode is Mode.REAL:
        # workers bind themselves once their threads exist
        for core in placement.assignments.values():
            cfg.topology._check_core(core)
    else:
        apply_placement(placement, cfg.topology)
    locking = cfg.workers_per_instance != 1
    instances = []
    for i, lo, hi in pm.ranges:
        sink = log_sink_factory(i) if log_sink_factory else None
        instances.append(Instance(i, lo, hi, locking=locking,
                                  n_workers=cfg.workers_per_instance,
                                  log_sink=sink))
    return Cluster(cfg, pm, instances, placement)
