"""``dig``: one entry point for every subsystem.

Exit codes: 0 success, 1 operational error, 2 usage error.  ``--json``
prints a machine-readable summary validated by the files in
``digmon/schemas``.  ``--config FILE`` reads a YAML mapping whose section
named after the subcommand supplies flag defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import yaml

__all__ = ["main", "build_parser", "SCHEMA_DIR"]

SCHEMA_DIR = Path(__file__).with_name("schemas")
log = logging.getLogger("digmon.cli")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- subcommands ---------------------------------------------------------------

def _sensor(kind: str):
    from .frontend import SensorConfig

    return SensorConfig.shunt_mirror() if kind == "shunt" else SensorConfig.hall_effect()


def cmd_synth(a):
    from .chain import SensingChain
    from .scenario import render_trace, resolve_scenario

    spec = resolve_scenario(a.scenario)
    if a.chain:
        chain = SensingChain(spec, _sensor(a.sensor), seed=a.seed)
        s = chain.samples(int(round(a.duration * chain.fs)))
        t, i, v, p = s.t / 1e9, s.current, s.voltage, s.power
        fs = chain.fs
    else:
        tr = render_trace(spec, a.rate, a.duration, seed=a.seed)
        t, i, v, p = tr.t, tr.current, tr.voltage, tr.power
        fs = a.rate
    if a.out:
        with open(a.out, "w", newline="") as fh:
            fh.write("t_s,current_a,voltage_v,power_w\n")
            np.savetxt(fh, np.column_stack([t, i, v, p]), fmt="%.9g", delimiter=",")
    return {"scenario": spec.name, "samples": int(p.size), "fs_hz": float(fs),
            "mean_power_w": float(p.mean()) if p.size else 0.0, "out": a.out}


def cmd_calibrate(a):
    from .calib import calibrate

    model = calibrate(_sensor(a.sensor), steps=a.steps, dwell=a.dwell, seed=a.seed)
    if a.out:
        model.save(a.out)
    return {"sensor": a.sensor, "gain_i": model.gain_i, "offset_i": model.offset_i,
            "gain_v": model.gain_v, "offset_v": model.offset_v, "r2_i": model.r2_i,
            "r2_v": model.r2_v, "n_points": model.n_points, "out": a.out}


def _agent_config(a, **extra):
    from .agent import AgentConfig

    over = {"node_id": a.node_id, "scenario": a.scenario, "broker_host": a.host, "broker_port": a.port,
            "calibration": a.calibration, "centroids": a.centroids, "psd_period": a.psd_period,
            "topic_prefix": a.prefix, "seed": a.seed if a.seed_explicit else None}
    over.update(extra)
    if a.agent_config:
        return AgentConfig.load(a.agent_config, **over)
    return AgentConfig.from_dict({k: v for k, v in over.items() if v is not None})


def cmd_agent(a):
    from .agent import Agent, MemorySink
    from .transport.client import Client

    cfg = _agent_config(a)
    client = None
    if a.offline:
        sink = MemorySink()
    else:
        client = Client(cfg.broker_host, cfg.broker_port, client_id=cfg.node_id).connect()
        sink = client
    agent = Agent(cfg, sink)
    try:
        agent.run(a.duration, realtime=a.realtime)
    finally:
        if client is not None:
            client.close()
    h = agent.health()
    return {"node_id": cfg.node_id, "topic_prefix": cfg.topic_prefix, "duration_s": a.duration,
            "published": h["published"], "outbox_dropped": h["outbox_dropped"],
            "fifo_overflow_events": h["fifo_overflow_events"], "health": h}


def cmd_broker(a):
    from .transport.broker import BrokerLimits, run_broker

    limits = BrokerLimits(queue_limit=a.queue_limit)

    def ready(b):
        print(f"broker listening on {b.host}:{b.port}", file=sys.stderr, flush=True)

    st = run_broker(a.host, a.port, limits, on_ready=ready, duration=a.duration)
    return {"host": a.host, "port": a.port, **{k: st.get(k, 0) for k in
            ("published", "delivered", "unrouted", "dropped", "protocol_errors")}}


def cmd_collect(a):
    from .collector import collector_run

    res = collector_run(a.root, a.filter or [], a.host, a.port, duration=a.duration,
                        fsync=a.fsync, max_bytes=a.max_bytes)
    return {"root": str(a.root), "filters": list(a.filter or []), **res}


def _scenario_windows(name, n_windows, seed, n_average=1):
    from .chain import simulate_power
    from .scenario import resolve_scenario
    from .spectral.psd import WINDOW_SECONDS, psd_windows

    spec = resolve_scenario(name)
    p = simulate_power(spec, n_windows * n_average * WINDOW_SECONDS, seed=seed)
    return spec, psd_windows(p, n_average=n_average)


def cmd_psd(a):
    from .spectral.peaks import extract_signature

    spec, psds = _scenario_windows(a.scenario, a.windows, a.seed, a.average)
    if a.out:
        with open(a.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["f_hz"] + [f"psd_db_{k}" for k in range(len(psds))])
            cols = [p.db() for p in psds]
            for j, f in enumerate(psds[0].freqs):
                w.writerow([f"{f:.6g}"] + [f"{c[j]:.6f}" for c in cols])
    sigs = [extract_signature(p) for p in psds]
    counts = [len(s.peaks) for s in sigs]
    combs = [[{"f0": c.f0, "n_harmonics": c.n_harmonics} for c in s.combs] for s in sigs]
    last = sigs[-1]
    return {"scenario": spec.name, "windows": len(psds), "n_average": a.average,
            "peak_counts": counts, "modal_peak_count": Counter(counts).most_common(1)[0][0],
            "peaks_last_window_hz": [round(p.frequency, 2) for p in last.peaks],
            "combs": combs, "out": a.out}


def cmd_train(a):
    from ._rng import spawn
    from .spectral import CORPUS_CLASSES
    from .spectral.centroid import train_centroids

    classes = a.classes or list(CORPUS_CLASSES)
    seeds = spawn(a.seed, len(classes))
    data = {c: _scenario_windows(c, a.windows, s)[1] for c, s in zip(classes, seeds)}
    model = train_centroids(data)
    model.save(a.out)
    return {"out": a.out, "classes": list(model.labels), "windows_per_class": a.windows}


def cmd_classify(a):
    from .spectral.centroid import CentroidModel, classify_many

    model = CentroidModel.load(a.model)
    spec, psds = _scenario_windows(a.scenario, a.windows, a.seed)
    res = classify_many(psds, model)
    counts = Counter(res)
    return {"scenario": spec.name, "windows": len(psds), "labels": dict(counts),
            "accuracy": counts.get(spec.name, 0) / max(len(psds), 1)}


def cmd_bench(a):
    from .transport.bench import bench_broker

    rep = bench_broker(a.publishers, a.period_ms, a.duration_s, host=a.host, port=a.port,
                       in_process=a.in_process)
    rep.pop("per_publisher", None)
    return rep


def cmd_export(a):
    from .collector import Kind, export_csv, export_psd, read_topic

    kind, _, _ = read_topic(a.root, a.topic, 0, 0)
    t1 = a.t1 if a.t1 is not None else 2**64 - 1
    if a.psd or kind == Kind.SPECTROGRAM:
        rows = export_psd(a.root, a.topic, a.t0, t1, a.out)
        fmt = "psd"
    else:
        rows = export_csv(a.root, a.topic, a.t0, t1, a.out)
        fmt = "scalar"
    return {"topic": a.topic, "rows": rows, "format": fmt, "out": str(a.out)}


def cmd_replay(a):
    from .replay import replay

    return replay(racks=a.racks, nodes_per_rack=a.nodes_per_rack, duration=a.duration, root=a.root,
                  seed=a.seed, scenarios=a.scenarios)


# -- parser ----------------------------------------------------------------------

def _common(p, suppress=False):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--json", action="store_true", default=d(False), help="print a JSON summary")
    p.add_argument("--seed", type=int, default=d(None), help="master seed (default 0)")
    p.add_argument("--config", default=d(None), help="YAML file with one section per subcommand")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser():
    root = _Parser(prog="dig", description="Out-of-band power monitoring simulator")
    _common(root)
    sub = root.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help, description=help)
        _common(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "render a scenario trace to CSV")
    p.add_argument("--scenario", default="idle")
    p.add_argument("--duration", type=float, default=0.1)
    p.add_argument("--rate", type=float, default=50_000.0, help="sample rate of the ideal trace")
    p.add_argument("--chain", action="store_true", help="pass through the simulated sensing hardware")
    p.add_argument("--sensor", choices=("hall", "shunt"), default="hall")
    p.add_argument("--out")

    p = add("calibrate", cmd_calibrate, "sweep the simulated bench and fit gain/offset")
    p.add_argument("--sensor", choices=("hall", "shunt"), default="hall")
    p.add_argument("--steps", type=int, default=11)
    p.add_argument("--dwell", type=float, default=1.0)
    p.add_argument("--out")

    p = add("agent", cmd_agent, "run one node agent")
    p.add_argument("--node-id")
    p.add_argument("--scenario")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--prefix")
    p.add_argument("--calibration")
    p.add_argument("--centroids")
    p.add_argument("--psd-period", type=float)
    p.add_argument("--agent-config", help="AgentConfig YAML")
    p.add_argument("--duration", type=float, default=10.0, help="simulated seconds")
    p.add_argument("--realtime", action="store_true")
    p.add_argument("--offline", action="store_true", help="publish into memory only")

    p = add("broker", cmd_broker, "run the pub/sub broker")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=1883)
    p.add_argument("--queue-limit", type=int, default=65536)
    p.add_argument("--duration", type=float, help="stop after this many seconds")

    p = add("collect", cmd_collect, "subscribe and persist to a file store")
    p.add_argument("--root", required=True)
    p.add_argument("--filter", action="append", help="topic filter (repeatable)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=1883)
    p.add_argument("--duration", type=float)
    p.add_argument("--fsync", choices=("none", "flush", "always"), default="flush")
    p.add_argument("--max-bytes", type=int)

    p = add("psd", cmd_psd, "spectra and peaks of a scenario")
    p.add_argument("--scenario", default="idle")
    p.add_argument("--windows", type=int, default=10)
    p.add_argument("--average", type=int, default=1, help="40 ms windows averaged per spectrum")
    p.add_argument("--out")

    p = add("train", cmd_train, "train the nearest-centroid classifier")
    p.add_argument("--out", required=True)
    p.add_argument("--windows", type=int, default=50)
    p.add_argument("--classes", nargs="+")

    p = add("classify", cmd_classify, "classify scenario windows")
    p.add_argument("--model", required=True)
    p.add_argument("--scenario", default="idle")
    p.add_argument("--windows", type=int, default=20)

    p = add("bench-broker", cmd_bench, "broker load benchmark")
    p.add_argument("--publishers", type=int, default=16)
    p.add_argument("--period-ms", type=float, default=1.0)
    p.add_argument("--duration-s", type=float, default=60.0)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--in-process", action="store_true")

    p = add("export", cmd_export, "export a stored topic to CSV")
    p.add_argument("--root", required=True)
    p.add_argument("--topic", required=True)
    p.add_argument("--t0", type=int, default=0)
    p.add_argument("--t1", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--psd", action="store_true", help="force the spectrogram format")

    p = add("replay", cmd_replay, "multi-rack topology at accelerated time")
    p.add_argument("--racks", type=int, default=3)
    p.add_argument("--nodes-per-rack", type=int, default=15)
    p.add_argument("--duration", type=float, default=2.0, help="simulated seconds")
    p.add_argument("--root", help="store directory (temporary if omitted)")
    p.add_argument("--scenarios", nargs="+")
    return root


def _apply_config(parser, argv):
    """Re-parse with config-file defaults for the chosen subcommand."""
    pre, _ = parser.parse_known_args(argv)
    if not pre.config or not pre.command:
        return parser.parse_args(argv)
    doc = yaml.safe_load(Path(pre.config).read_text()) or {}
    if not isinstance(doc, dict):
        raise UsageError(f"{pre.config}: top level must be a mapping")
    section = doc.get(pre.command, {}) or {}
    sub = parser._subparsers._group_actions[0].choices[pre.command]
    dests = {a.dest for a in sub._actions}
    values = {}
    for k, v in section.items():
        key = k.replace("-", "_")
        if key not in dests:
            raise UsageError(f"{pre.config}: unknown key {k!r} for {pre.command}")
        values[key] = v
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def _print(summary: dict, as_json: bool):
    if as_json:
        print(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable))
        return
    for k, v in summary.items():
        if isinstance(v, (dict, list)) and len(json.dumps(v, default=_jsonable)) > 100:
            v = json.dumps(v, default=_jsonable)[:97] + "..."
        print(f"{k}: {v}")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(type(x).__name__)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (OSError, yaml.YAMLError) as exc:
        print(f"dig: cannot read config: {exc}", file=sys.stderr)
        return 2
    if not args.command:
        parser.print_help(sys.stderr)
        return 2
    # an agent config file may carry its own seed; only an explicit flag overrides it
    args.seed_explicit = args.seed is not None
    if args.seed is None:
        args.seed = 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        summary = args.func(args)
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # operational failure: report, exit 1
        if args.verbose:
            log.exception("command failed")
        print(f"dig {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    summary = {"command": args.command, **summary, "elapsed_s": round(time.perf_counter() - t0, 3)}
    _print(summary, args.json)
    return 0


if __name__ == "__main__":
    sys.exit(main())
