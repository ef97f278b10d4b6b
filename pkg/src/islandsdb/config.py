"""TOML experiment configuration.

See docs/config.md for the grammar. Unknown keys are rejected so typos do
not silently fall back to defaults.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from .deployment import DeploymentConfig
from .harness import ExperimentSpec
from .sim import CostModel
from .topology import CommClass, Mode, PlacementPolicy, Topology
from .workload import WorkloadKind, WorkloadSpec


class ConfigError(ValueError):
    pass


_LATENCY_KEYS = {"same_core": CommClass.SAME_CORE,
                 "same_socket": CommClass.SAME_SOCKET,
                 "cross_socket": CommClass.CROSS_SOCKET}


def _take(block: dict, allowed: set[str], where: str) -> dict:
    extra = set(block) - allowed
    if extra:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(extra)}")
    return block


def topology_from(block: dict | None, mode: Mode | None = None) -> Topology:
    block = _take(dict(block or {}),
                  {"sockets", "cores_per_socket", "mode", "sim_latency_ns"}, "topology")
    m = Mode(mode or block.get("mode", "simulated"))
    if m is Mode.REAL and "sockets" not in block:
        return Topology.detect()
    lat = _take(dict(block.get("sim_latency_ns", {})), set(_LATENCY_KEYS),
                "topology.sim_latency_ns")
    kw: dict[str, Any] = {}
    if lat:
        base = {c: v for c, v in Topology(1, 1).sim_latency.items()}
        base.update({_LATENCY_KEYS[k]: int(v) for k, v in lat.items()})
        kw["sim_latency"] = base
    return Topology(int(block.get("sockets", 4)),
                    int(block.get("cores_per_socket", 4)), m, **kw)


def deployment_from(block: dict, topo: Topology, total_rows: int) -> DeploymentConfig:
    block = _take(dict(block), {"n_instances", "workers_per_instance",
                                "placement", "total_rows"}, "deployment")
    n = int(block.get("n_instances", 1))
    w = block.get("workers_per_instance")
    if w is None:
        w = topo.total_cores // n
    return DeploymentConfig(n, int(w), int(block.get("total_rows", total_rows)),
                            PlacementPolicy(block.get("placement", "group")), topo)


def workload_from(block: dict | None) -> WorkloadSpec:
    block = _take(dict(block or {}), {"kind", "rows_per_txn", "pct_multisite",
                                      "zipf_s", "seed", "total_rows"}, "workload")
    return WorkloadSpec(
        kind=WorkloadKind(block.get("kind", "MicroUpdate")),
        rows_per_txn=int(block.get("rows_per_txn", 10)),
        pct_multisite=float(block.get("pct_multisite", 0.0)),
        zipf_s=float(block.get("zipf_s", 0.0)),
        total_rows=int(block.get("total_rows", 16000)),
        rng_seed=int(block.get("seed", 0)))


def costs_from(block: dict | None) -> CostModel:
    names = {f.name for f in fields(CostModel)}
    block = _take(dict(block or {}), names, "costs")
    return CostModel(**block)


def experiment_from_dict(doc: dict, mode: Mode | None = None) -> ExperimentSpec:
    _take(doc, {"topology", "deployment", "workload", "experiment", "costs"}, "")
    topo = topology_from(doc.get("topology"), mode)
    wl = workload_from(doc.get("workload"))
    deps = doc.get("deployment", [{}])
    if isinstance(deps, dict):
        deps = [deps]
    dconfs = tuple(deployment_from(d, topo, wl.total_rows) for d in deps)
    for d in dconfs:
        if d.total_rows != wl.total_rows:
            raise ConfigError("deployment and workload disagree on total_rows")
    exp = _take(dict(doc.get("experiment", {})),
                {"id", "warmup_s", "measure_s", "repetitions"}, "experiment")
    return ExperimentSpec(
        deployments=dconfs, workload=wl,
        warmup_s=float(exp.get("warmup_s", 2.0)),
        measure_s=float(exp.get("measure_s", 10.0)),
        repetitions=int(exp.get("repetitions", 3)),
        experiment_id=str(exp.get("id", "exp")),
        costs=costs_from(doc.get("costs")))


def loads(text: str, mode: Mode | None = None) -> ExperimentSpec:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(str(exc)) from exc
    return experiment_from_dict(doc, mode)


def load(path: str | Path, mode: Mode | None = None) -> ExperimentSpec:
    return loads(Path(path).read_text(), mode)
