"""Command-line entry point: ``islandsdb <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import kernels
from .config import ConfigError, load
from .harness import (CSV_COLUMNS, CounterLayout, SweepParam, _row,
                      run_counter_bench, run_experiment, run_placement_bench,
                      sweep)
from .topology import Mode, Topology
from .transport import IpcMechanism, measure_ipc


def _topology(args) -> Topology:
    mode = Mode(args.mode)
    if mode is Mode.REAL:
        return Topology.detect()
    return Topology(args.sockets, args.cores_per_socket, Mode.SIMULATED)


def _write_csv(rows, out) -> None:
    import csv
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if out:
            fh.close()


def cmd_run(args) -> int:
    spec = load(args.config, Mode(args.mode) if args.mode else None)
    rows = []
    for dep in spec.deployments:
        m = run_experiment(spec, dep)
        rows.append(_row(f"{spec.experiment_id}:{dep.label}", dep, spec.workload,
                         spec.repetitions, m))
        if m.flagged:
            print(f"# {dep.label}: repetitions {m.flagged} aborted > 50%",
                  file=sys.stderr)
    _write_csv(rows, args.out)
    return 0


def _parse_values(text: str) -> list[float]:
    vals = []
    for part in text.split(","):
        part = part.strip()
        if part:
            vals.append(float(part) if "." in part else int(part))
    if not vals:
        raise argparse.ArgumentTypeError("no values given")
    return vals


def cmd_sweep(args) -> int:
    spec = load(args.config, Mode(args.mode) if args.mode else None)
    res = sweep(SweepParam(args.param), args.values, spec)
    _write_csv(res.rows, args.out)
    return 0


def cmd_counter(args) -> int:
    t = _topology(args)
    layouts = list(CounterLayout) if args.layout == "all" else [CounterLayout(args.layout)]
    print(f"# kernels={kernels.IMPLEMENTATION} mode={t.mode.value} "
          f"topology={t.sockets}x{t.cores_per_socket}")
    print("layout,mode,throughput_m_per_s,stddev,cv")
    for lay in layouts:
        r = run_counter_bench(lay, t, args.duration, args.repetitions)
        print(f"{lay.value},{r.mode.value},{r.throughput_m:.3f},"
              f"{r.std_dev:.3f},{r.cv:.5f}")
    return 0


def cmd_ipc(args) -> int:
    t = Topology.detect()
    if Mode(args.mode) is Mode.SIMULATED:
        sim = Topology(args.sockets, args.cores_per_socket)
        print("class,latency_ns")
        for cls, ns in sorted(sim.sim_latency.items()):
            print(f"{cls.name.lower()},{ns}")
        return 0
    pairs = {"same-socket": None, "cross-socket": None}
    if t.total_cores >= 2:
        pairs["same-socket"] = (0, 1) if t.cores_per_socket >= 2 else None
    if t.sockets >= 2:
        pairs["cross-socket"] = (0, t.cores_per_socket)
    print("mechanism,placement,round_trips_per_s")
    for mech in IpcMechanism:
        for name, cores in pairs.items():
            if name == "cross-socket" and cores is None:
                print(f"{mech.value},{name},SKIPPED")
                continue
            rt = measure_ipc(mech, name == "same-socket", args.duration, cores)
            print(f"{mech.value},{name},{rt:.0f}")
    return 0


def cmd_placement(args) -> int:
    t = _topology(args)
    res = run_placement_bench(t, repetitions=args.repetitions,
                              measure_s=args.duration)
    if res.skipped:
        print(f"SKIPPED: {res.notice}")
        return 0
    print("policy,throughput_tps,stddev")
    for pol, m in res.results.items():
        print(f"{pol.value},{m.throughput:.1f},{m.throughput_stddev:.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="islandsdb", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mode_default="simulated", topo=True):
        sp.add_argument("--mode", choices=[m.value for m in Mode],
                        default=mode_default)
        sp.add_argument("--out", default=None, help="CSV output path")
        if topo:
            sp.add_argument("--sockets", type=int, default=4)
            sp.add_argument("--cores-per-socket", type=int, default=4)

    r = sub.add_parser("run", help="run the experiment in a config file")
    r.add_argument("--config", required=True)
    common(r, mode_default=None, topo=False)
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="sweep one parameter, emit CSV")
    s.add_argument("--param", required=True, choices=[x.value for x in SweepParam])
    s.add_argument("--values", required=True, type=_parse_values)
    s.add_argument("--config", required=True)
    common(s, mode_default=None, topo=False)
    s.set_defaults(fn=cmd_sweep)

    c = sub.add_parser("counter-bench", help="lock-protected counter contention")
    c.add_argument("--layout", default="all",
                   choices=["all"] + [x.value for x in CounterLayout])
    c.add_argument("--duration", type=float, default=0.01)
    c.add_argument("--repetitions", type=int, default=5)
    common(c)
    c.set_defaults(fn=cmd_counter)

    i = sub.add_parser("ipc-bench", help="message round-trip rates")
    i.add_argument("--duration", type=float, default=0.5)
    common(i, mode_default="real")
    i.set_defaults(fn=cmd_ipc)

    pl = sub.add_parser("placement-bench", help="Spread/Group/Mix/Unpinned")
    pl.add_argument("--duration", type=float, default=0.01)
    pl.add_argument("--repetitions", type=int, default=5)
    common(pl)
    pl.set_defaults(fn=cmd_placement)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
