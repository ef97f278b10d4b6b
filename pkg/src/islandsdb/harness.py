"""Experiment driver: throughput/latency/breakdown measurements, sweeps to
CSV, the linear throughput model, and the counter and placement benches."""
from __future__ import annotations

import csv
import enum
import io
import logging
import statistics
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .deployment import DeploymentConfig, deploy
from .sim import NEVER, CostModel, Sim
from .topology import Mode, PlacementPolicy, Topology
from .txn import Category
from .workload import WorkloadKind, WorkloadSource, WorkloadSpec

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "experiment_id", "config_label", "n_instances", "workers_per_instance",
    "placement", "workload_kind", "rows_per_txn", "pct_multisite", "zipf_s",
    "active_cores", "repetitions", "throughput_tps", "throughput_stddev",
    "abort_rate", "p50_us", "p99_us", "frac_work", "frac_comm", "frac_log",
    "frac_lockwait",
)

_NS = 1_000_000_000


@dataclass(frozen=True)
class ExperimentSpec:
    deployments: tuple[DeploymentConfig, ...]
    workload: WorkloadSpec
    warmup_s: float = 2.0
    measure_s: float = 10.0
    repetitions: int = 3
    experiment_id: str = "exp"
    costs: CostModel = field(default_factory=CostModel)

    def __post_init__(self):
        if isinstance(self.deployments, DeploymentConfig):
            object.__setattr__(self, "deployments", (self.deployments,))
        if not self.deployments:
            raise ValueError("at least one deployment is required")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.warmup_s < 0 or self.measure_s < 0:
            raise ValueError("durations must be >= 0")


@dataclass
class Measurement:
    config_label: str
    throughput: float
    throughput_stddev: float
    abort_rate: float
    p50_us: float
    p99_us: float
    breakdown: dict[str, float]
    repetitions: int
    per_repetition: list[float] = field(default_factory=list)
    committed: int = 0
    committed_by_instance: list[int] = field(default_factory=list)
    flagged: list[int] = field(default_factory=list)
    workers: int = 1

    @property
    def cost_per_txn_us(self) -> float:
        """Worker time per committed transaction: the inverse of per-worker
        throughput."""
        if not self.throughput:
            return float("inf")
        return 1e6 * self.workers / self.throughput


_BREAKDOWN_KEYS = {Category.WORK: "work", Category.COMM: "comm",
                   Category.LOG: "log", Category.LOCKWAIT: "lockwait"}


def _run_once(dep: DeploymentConfig, spec: ExperimentSpec, seed: int):
    if dep.topology.mode is Mode.REAL:
        from .realrun import run_real
        return run_real(dep, spec.workload, spec.warmup_s, spec.measure_s, seed)
    cluster = deploy(dep)
    wl = replace(spec.workload, rng_seed=seed)
    source = WorkloadSource(wl, cluster.partition_map, dep.workers_per_instance)
    lo = int(spec.warmup_s * _NS)
    hi = lo + int(spec.measure_s * _NS)
    sim = Sim(cluster, source, costs=spec.costs, seed=seed,
              window=(lo, hi), stop_at=hi)
    sim.run(until=hi)
    committed = [0] * dep.n_instances
    aborted = 0
    lat: list[int] = []
    time = {c: 0 for c in Category}
    for w in sim.workers:
        committed[w.node_id] += w.stats.committed
        aborted += w.stats.aborted
        lat.extend(w.stats.latencies)
        for c, v in w.stats.time.items():
            time[c] += v
    cluster.shutdown()
    return committed, aborted, lat, time


def run_experiment(spec: ExperimentSpec,
                   deployment: DeploymentConfig | None = None) -> Measurement:
    """Deploy fresh state per repetition and aggregate the measured window."""
    dep = deployment or spec.deployments[0]
    tps, flagged = [], []
    committed_by = [0] * dep.n_instances
    lat_all: list[int] = []
    time_all = {c: 0 for c in Category}
    n_commit = n_abort = 0
    for rep in range(spec.repetitions):
        seed = spec.workload.rng_seed + 1_000_003 * rep
        committed, aborted, lat, time = _run_once(dep, spec, seed)
        c = sum(committed)
        tps.append(c / spec.measure_s if spec.measure_s > 0 else 0.0)
        if c + aborted and aborted / (c + aborted) > 0.5:
            flagged.append(rep)
            log.warning("%s repetition %d: more than half of attempts aborted",
                        dep.label, rep)
        for i, v in enumerate(committed):
            committed_by[i] += v
        n_commit += c
        n_abort += aborted
        lat_all.extend(lat)
        for k, v in time.items():
            time_all[k] += v
    total_t = sum(time_all.values())
    if total_t:
        breakdown = {_BREAKDOWN_KEYS[c]: v / total_t for c, v in time_all.items()}
    else:
        breakdown = {k: 0.0 for k in _BREAKDOWN_KEYS.values()}
    if lat_all:
        p50, p99 = np.percentile(np.asarray(lat_all, dtype=np.float64), [50, 99])
    else:
        p50 = p99 = 0.0
    return Measurement(
        config_label=dep.label,
        throughput=statistics.fmean(tps),
        throughput_stddev=statistics.stdev(tps) if len(tps) > 1 else 0.0,
        abort_rate=n_abort / (n_commit + n_abort) if n_commit + n_abort else 0.0,
        p50_us=float(p50) / 1000, p99_us=float(p99) / 1000,
        breakdown=breakdown, repetitions=spec.repetitions,
        per_repetition=tps, committed=n_commit,
        committed_by_instance=committed_by, flagged=flagged,
        workers=dep.active_cores)


# ---- throughput model ------------------------------------------------------

@dataclass(frozen=True)
class ThroughputModel:
    t_local: float
    t_distr: float

    def __post_init__(self):
        if self.t_local < 0 or self.t_distr < 0:
            raise ValueError("throughputs must be >= 0")


def model_predict(m: ThroughputModel, p: float) -> float:
    """Linear mix of local and distributed throughput at distributed fraction p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    return (1.0 - p) * m.t_local + p * m.t_distr


# ---- sweeps ------------------------------------------------------------------

class SweepParam(str, enum.Enum):
    PCT_MULTISITE = "pct_multisite"
    ZIPF_S = "zipf_s"
    ACTIVE_CORES = "active_cores"
    N_INSTANCES = "n_instances"


def _apply(param: SweepParam, value, dep: DeploymentConfig, wl: WorkloadSpec
           ) -> tuple[DeploymentConfig, WorkloadSpec]:
    if param is SweepParam.PCT_MULTISITE:
        return dep, replace(wl, pct_multisite=float(value))
    if param is SweepParam.ZIPF_S:
        return dep, replace(wl, zipf_s=float(value))
    v = int(value)
    if param is SweepParam.ACTIVE_CORES:
        # grow the configuration's shape: more instances of the same size,
        # or a bigger single instance
        if dep.n_instances == 1:
            return replace(dep, workers_per_instance=v), wl
        if v % dep.workers_per_instance:
            raise ValueError(f"{v} cores do not divide into instances of "
                             f"{dep.workers_per_instance}")
        return replace(dep, n_instances=v // dep.workers_per_instance), wl
    # n_instances: same active cores, split differently
    cores = dep.active_cores
    if cores % v:
        raise ValueError(f"{cores} cores do not divide into {v} instances")
    return replace(dep, n_instances=v, workers_per_instance=cores // v), wl


def _row(eid: str, dep, wl, reps, m: Measurement | None) -> dict:
    row = {
        "experiment_id": eid, "config_label": dep.label if dep else "",
        "n_instances": dep.n_instances if dep else "",
        "workers_per_instance": dep.workers_per_instance if dep else "",
        "placement": dep.placement_policy.value if dep else "",
        "workload_kind": wl.kind.value, "rows_per_txn": wl.rows_per_txn,
        "pct_multisite": wl.pct_multisite, "zipf_s": wl.zipf_s,
        "active_cores": dep.active_cores if dep else "", "repetitions": reps,
    }
    if m is None:
        row.update({k: "" for k in CSV_COLUMNS if k not in row})
        return row
    row.update({
        "throughput_tps": round(m.throughput, 3),
        "throughput_stddev": round(m.throughput_stddev, 3),
        "abort_rate": round(m.abort_rate, 6),
        "p50_us": round(m.p50_us, 3), "p99_us": round(m.p99_us, 3),
        "frac_work": round(m.breakdown["work"], 6),
        "frac_comm": round(m.breakdown["comm"], 6),
        "frac_log": round(m.breakdown["log"], 6),
        "frac_lockwait": round(m.breakdown["lockwait"], 6),
    })
    return row


@dataclass
class SweepResult:
    rows: list[dict]
    measurements: list[tuple[str, object, Measurement | None, str | None]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())


def sweep(param: SweepParam | str, values: Sequence, base: ExperimentSpec
          ) -> SweepResult:
    """One row per (deployment, value); failing cells become error rows."""
    param = SweepParam(param)
    if not values:
        raise ValueError("values must be nonempty")
    rows, ms = [], []
    for base_dep in base.deployments:
        for v in values:
            eid = f"{base.experiment_id}:{base_dep.label}:{param.value}={v}"
            dep, wl = None, base.workload
            try:
                dep, wl = _apply(param, v, base_dep, base.workload)
                spec = replace(base, deployments=(dep,), workload=wl)
                m = run_experiment(spec)
            except Exception as exc:  # recorded, sweep continues
                log.warning("sweep cell %s failed: %s", eid, exc)
                row = _row(eid + ":error", dep or base_dep, wl,
                           base.repetitions, None)
                rows.append(row)
                ms.append((base_dep.label, v, None, str(exc)))
                continue
            rows.append(_row(eid, dep, wl, base.repetitions, m))
            ms.append((base_dep.label, v, m, None))
    return SweepResult(rows, ms)


# ---- counter bench -----------------------------------------------------------

class CounterLayout(str, enum.Enum):
    SINGLE = "single"
    PER_SOCKET = "per-socket"
    PER_CORE = "per-core"


@dataclass
class CounterResult:
    layout: CounterLayout
    mode: Mode
    throughput_m: float      # million increments per second (mean)
    std_dev: float           # across repetitions, same unit
    per_repetition: list[float]

    @property
    def cv(self) -> float:
        return self.std_dev / self.throughput_m if self.throughput_m else 0.0


def counter_groups(layout: CounterLayout, t: Topology) -> list[list[int]]:
    cores = range(t.total_cores)
    if layout is CounterLayout.SINGLE:
        return [list(cores)]
    if layout is CounterLayout.PER_SOCKET:
        return [list(t.cores_of(s)) for s in range(t.sockets)]
    return [[c] for c in cores]


def run_counter_bench(layout: CounterLayout | str, topology: Topology,
                      duration_s: float, repetitions: int = 5, *,
                      cs_ns: int = 20, think_ns: int = 10, jitter_ns: int = 5,
                      seed: int = 1) -> CounterResult:
    """Lock-protected counter increments: one counter, one per socket, or
    one per core, with every core of the topology incrementing."""
    layout = CounterLayout(layout)
    groups = counter_groups(layout, topology)
    runs = []
    if topology.mode is Mode.REAL:
        counter_of, cores = [], []
        for g, members in enumerate(groups):
            for c in members:
                counter_of.append(g)
                cores.append(c)
        for _ in range(repetitions):
            n = kernels.real_counter_run(counter_of, duration_s, cores)
            runs.append(sum(n) / duration_s / 1e6 if duration_s > 0 else 0.0)
    else:
        n = topology.total_cores
        lat = [[topology.latency(a, b) for b in range(n)] for a in range(n)]
        dur = int(duration_s * _NS)
        for r in range(repetitions):
            counts = kernels.sim_counter_run(groups, lat, cs_ns, think_ns,
                                             jitter_ns, dur, seed + r)
            runs.append(sum(counts) / duration_s / 1e6 if dur > 0 else 0.0)
    mean = statistics.fmean(runs) if runs else 0.0
    sd = statistics.stdev(runs) if len(runs) > 1 else 0.0
    return CounterResult(layout, topology.mode, mean, sd, runs)


# ---- placement bench -----------------------------------------------------------

@dataclass
class PlacementResult:
    skipped: bool
    notice: str = ""
    results: dict[PlacementPolicy, Measurement] = field(default_factory=dict)


def run_placement_bench(topology: Topology, workload: WorkloadSpec | None = None,
                        policies: Iterable[PlacementPolicy] = tuple(PlacementPolicy),
                        workers: int = 4, *, warmup_s: float = 0.002,
                        measure_s: float = 0.01, repetitions: int = 5,
                        costs: CostModel | None = None) -> PlacementResult:
    """Same single-instance workload under each placement policy.

    Real mode needs at least two sockets; otherwise the bench is skipped.
    """
    if topology.mode is Mode.REAL and topology.sockets < 2:
        return PlacementResult(True, "placement bench skipped: single-socket host")
    wl = workload or WorkloadSpec(WorkloadKind.PAYMENT_LIKE, total_rows=4000)
    out = PlacementResult(False)
    for pol in policies:
        dep = DeploymentConfig(1, workers, wl.total_rows, pol, topology)
        spec = ExperimentSpec((dep,), wl, warmup_s, measure_s, repetitions,
                              f"placement:{pol.value}", costs or CostModel())
        out.results[pol] = run_experiment(spec)
    return out


__all__ = ["CSV_COLUMNS", "ExperimentSpec", "Measurement", "run_experiment",
           "ThroughputModel", "model_predict", "SweepParam", "SweepResult",
           "sweep", "CounterLayout", "CounterResult", "counter_groups",
           "run_counter_bench", "PlacementResult", "run_placement_bench",
           "NEVER"]
