"""Command-line harness: ``manasim {run,ckpt-run,restart,explore,metrics,replay}``.

Exit codes are stable:

    0  success
    2  usage error
    3  deadlock (quiescent with unfinished ranks)
    4  invariant violation
    5  corrupt, incomplete or unsupported image set
    6  schedule exhausted (replay against the wrong configuration)

Options may also come from ``--config FILE`` (JSON, or ``key = value``
lines); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import engine as eng
from .ckptstore import ImageSet, MissingRank, UnsupportedVersion, restart, write_image_set
from .explore import ExploreConfig, acceptance_configs, explore, replay_counterexample
from .runtime import Deadlock, Simulation, run
from .simnet import Schedule, ScheduleExhausted, read_trace, write_trace
from .upperhalf import CorruptImage
from .workloads import WorkloadSpec

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DEADLOCK = 3
EXIT_VIOLATION = 4
EXIT_CORRUPT = 5
EXIT_EXHAUSTED = 6

DEFAULTS = {
    "engine": "linear",
    "world_size": 4,
    "seed": 0,
    "workload": "iter-allreduce",
    "steps": 4,
    "payload_bytes": 8,
}


def metrics(trace) -> dict[str, int]:
    """Event counts from a trace (a path or a list of records)."""
    recs = read_trace(trace) if isinstance(trace, (str, Path)) else trace
    out = {"collectives": 0, "extra-barriers": 0, "ctl-messages": 0,
           "extra-iteration-rounds": 0, "drained": 0}
    for rec in recs:
        for e in rec["detail"].get("effects", ()):
            k = e["kind"]
            if k == "enter-collective":
                out["collectives" if e["phase"] == 2 else "extra-barriers"] += 1
            elif k == "ctl-send":
                out["ctl-messages"] += 1
            elif k == "coord-note" and e["note"] == "extra-iteration":
                out["extra-iteration-rounds"] += 1
            elif k == "image-write":
                out["drained"] += e["drained"]
    return out


def load_config(path) -> dict:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        raw = json.loads(text)
    else:
        raw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: expected key = value, got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            try:
                raw[k] = json.loads(v)
            except json.JSONDecodeError:
                raw[k] = v.strip("'\"")
    return {k.replace("-", "_"): v for k, v in raw.items()}


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    file_cfg = load_config(args.config) if getattr(args, "config", None) else {}
    for k, v in DEFAULTS.items():
        if getattr(args, k, "absent") is None:
            setattr(args, k, file_cfg.get(k, v))
    for k, v in file_cfg.items():
        if getattr(args, k, None) is None:
            setattr(args, k, v)
    return args


def _spec(args) -> WorkloadSpec:
    return WorkloadSpec(args.workload, int(args.world_size), int(args.steps),
                        int(args.payload_bytes), int(args.seed))


def _trace_path(args, label: str) -> Path | None:
    if args.trace:
        return Path(args.trace)
    d = os.environ.get("MANA_SIM_TRACE_DIR")
    if d:
        return Path(d) / f"{label}.ndjson"
    return None


def _emit(args, result: dict, text: str) -> None:
    print(json.dumps(result, sort_keys=True) if args.json else text)


def _finish(args, sim: Simulation, label: str, result: dict) -> int:
    path = _trace_path(args, label)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_trace(sim.trace, path)
        result["trace"] = str(path)
    if sim.violations:
        result["violations"] = sim.violations
        _emit(args, result, f"invariant violation: {sim.violations[0]}")
        return EXIT_VIOLATION
    return EXIT_OK


def _drive(args, sim: Simulation, label: str) -> tuple[int, dict]:
    try:
        run(sim, Schedule.seeded(int(args.seed)))
    except Deadlock as exc:
        result = {"error": "deadlock", "detail": str(exc), "events": sim.steps}
        _finish(args, sim, label, result)
        _emit(args, result, f"deadlock after {sim.steps} events: {exc}"
              + (f" (trace {result['trace']})" if "trace" in result else ""))
        return EXIT_DEADLOCK, result
    result = {"digest": sim.digest(), "events": sim.steps}
    return _finish(args, sim, label, result), result


def cmd_run(args) -> int:
    spec = _spec(args)
    sim = Simulation(spec.programs(), eng.engine_id(args.engine))
    code, result = _drive(args, sim, f"run-{spec.name}-{args.engine}-{spec.seed}")
    if code == EXIT_OK:
        _emit(args, result, f"digest {result['digest']}  events {result['events']}")
    return code


def cmd_ckpt_run(args) -> int:
    spec = _spec(args)
    if not args.ckpt_at_event:
        print("ckpt-run needs at least one --ckpt-at-event", file=sys.stderr)
        return EXIT_USAGE
    if not args.image_dir:
        print("ckpt-run needs --image-dir", file=sys.stderr)
        return EXIT_USAGE
    sim = Simulation(spec.programs(), eng.engine_id(args.engine), ckpt_at=args.ckpt_at_event)
    try:
        code, result = _drive(args, sim, f"ckpt-{spec.name}-{args.engine}-{spec.seed}")
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    if code != EXIT_OK:
        return code
    root = Path(args.image_dir)
    dirs = []
    epochs = sorted(sim.images)
    for epoch in epochs:
        d = root if len(epochs) == 1 else root / f"epoch-{epoch}"
        write_image_set(sim.images[epoch], d, spec.world_size, spec.to_dict(),
                        sim.image_steps[epoch])
        dirs.append(str(d))
    result["image_sets"] = dirs
    _emit(args, result, f"digest {result['digest']}  events {result['events']}  "
          f"images {', '.join(dirs)}")
    return EXIT_OK


def cmd_restart(args) -> int:
    if not args.image_dir:
        print("restart needs --image-dir", file=sys.stderr)
        return EXIT_USAGE
    try:
        images = ImageSet(args.image_dir)
        spec = WorkloadSpec.from_dict(images.workload)
        sim = restart(images, eng.engine_id(args.engine), spec.programs())
    except (CorruptImage, MissingRank, UnsupportedVersion) as exc:
        print(f"cannot restart: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    code, result = _drive(args, sim, f"restart-{spec.name}-{args.engine}-{args.seed}")
    if code == EXIT_OK:
        _emit(args, result, f"digest {result['digest']}  events {result['events']}")
    return code


def _scenarios(engine: str) -> dict[str, ExploreConfig]:
    return {c.name: c for c in acceptance_configs(engine)}


def _scenario_cfg(args) -> ExploreConfig:
    cfgs = _scenarios(args.engine)
    if args.scenario not in cfgs:
        raise SystemExit(f"unknown scenario {args.scenario!r}; choose from {sorted(cfgs)}")
    base = cfgs[args.scenario]
    return ExploreConfig(base.programs, base.engine, mutants=tuple(args.mutant or ()),
                         max_states=args.max_states, name=base.name)


def cmd_explore(args) -> int:
    if args.scenario == "all":
        names = [n for n, c in _scenarios(args.engine).items()
                 if args.world_size is None or c.world_size == int(args.world_size)]
    else:
        names = [args.scenario]
    reports = []
    code = EXIT_OK
    for name in names:
        args.scenario = name
        rep = explore(_scenario_cfg(args), workers=args.workers)
        d = rep.to_json()
        d["name"] = name
        reports.append(d)
        if rep.violations:
            code = max(code, EXIT_VIOLATION)
        elif rep.deadlocks and code == EXIT_OK:
            code = EXIT_DEADLOCK
        if not args.json:
            print(f"{name}: states {rep.distinct_states}  traces {rep.traces_explored}  "
                  f"violations {len(rep.violations)}  deadlocks {rep.deadlock_count}  "
                  f"window-entries {len(rep.window_entries)}  labels {''.join(sorted(rep.labels))}"
                  + ("  INCOMPLETE" if rep.incomplete else ""))
    if args.report:
        Path(args.report).write_text(json.dumps(reports, indent=1, sort_keys=True) + "\n")
    if args.json:
        print(json.dumps(reports, sort_keys=True))
    return code


def cmd_replay(args) -> int:
    doc = json.loads(Path(args.schedule).read_text())
    fingerprint = None
    if isinstance(doc, dict):
        fingerprint = doc.get("config")
        doc = doc["counterexample"]
    try:
        sim = replay_counterexample([int(x) for x in doc], _scenario_cfg(args), fingerprint)
    except ScheduleExhausted as exc:
        print(f"schedule exhausted: {exc}", file=sys.stderr)
        return EXIT_EXHAUSTED
    result = {"events": sim.steps, "violations": sim.violations}
    path = _trace_path(args, f"replay-{args.scenario}")
    if path is not None:
        write_trace(sim.trace, path)
        result["trace"] = str(path)
    _emit(args, result, f"replayed {sim.steps} events, {len(sim.violations)} violation(s)"
          + "".join(f"\n  step {v['step']}: {v['invariant']}: {v['detail']}" for v in sim.violations))
    return EXIT_VIOLATION if sim.violations else EXIT_OK


def cmd_metrics(args) -> int:
    try:
        m = metrics(args.trace_file)
    except (ValueError, KeyError) as exc:
        print(f"malformed trace: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _emit(args, m, "\n".join(f"{k:24} {v}" for k, v in m.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--engine", choices=sorted(eng.ENGINES))
    common.add_argument("--world-size", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--trace", help="trace output path (default: $MANA_SIM_TRACE_DIR/<label>.ndjson)")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--config", help="JSON or key=value file of option defaults")

    wl = argparse.ArgumentParser(add_help=False)
    wl.add_argument("--workload")
    wl.add_argument("--steps", type=int)
    wl.add_argument("--payload-bytes", type=int)

    p = argparse.ArgumentParser(prog="manasim", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("run", parents=[common, wl], help="run a workload natively")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("ckpt-run", parents=[common, wl], help="run with checkpoints, write images")
    s.add_argument("--ckpt-at-event", type=int, action="append",
                   help="begin a checkpoint once this many events have run (repeatable)")
    s.add_argument("--image-dir")
    s.set_defaults(fn=cmd_ckpt_run)

    s = sub.add_parser("restart", parents=[common], help="restart from an image set")
    s.add_argument("--image-dir")
    s.set_defaults(fn=cmd_restart)

    s = sub.add_parser("explore", parents=[common], help="exhaustively explore a scenario")
    s.add_argument("--scenario", default="all")
    s.add_argument("--mutant", action="append", help="protocol fault to inject (repeatable)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--max-states", type=int, default=3_000_000)
    s.add_argument("--report", help="write the verification report JSON here")
    s.set_defaults(fn=cmd_explore)

    s = sub.add_parser("replay", parents=[common], help="replay a counterexample schedule")
    s.add_argument("--scenario", required=True)
    s.add_argument("--schedule", required=True,
                   help="JSON decision array, or a violation record with counterexample and config")
    s.add_argument("--mutant", action="append")
    s.add_argument("--max-states", type=int, default=3_000_000)
    s.set_defaults(fn=cmd_replay)

    s = sub.add_parser("metrics", parents=[common], help="count protocol events in a trace")
    s.add_argument("trace_file")
    s.set_defaults(fn=cmd_metrics)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    explore_ws = args.world_size
    args = _resolve(args)
    if args.cmd == "explore":
        args.world_size = explore_ws
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
