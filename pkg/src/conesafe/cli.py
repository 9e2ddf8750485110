"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import kg
from .metrics import BUILTIN_SCENARIOS, SUITES, SuiteReport, audit_report, make_planner, render_table, run_suite
from .planner import ConfigError, ReplayPlanner
from .sim import AuditFailure, EpisodeRecord, Toggles, audit_record, run_episode
from .world import PlacementInfeasible, ScenarioError, load_scenario

OK, CHECK_FAILED, USAGE, RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _scenario(ref: str):
    if ref in BUILTIN_SCENARIOS:
        return BUILTIN_SCENARIOS[ref]
    path = Path(ref)
    if not path.is_file():
        raise UsageError(f"scenario file not found: {path}")
    try:
        return load_scenario(path)
    except (ScenarioError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid scenario {path}: {exc}") from exc


def cmd_run(args) -> int:
    scenario = _scenario(args.scenario)
    if args.strategy:
        scenario = replace(scenario, target_strategy=args.strategy)
    if args.replay:
        if not Path(args.replay).is_file():
            raise UsageError(f"transcript not found: {args.replay}")
        planner = ReplayPlanner.from_file(args.replay)
    else:
        try:
            planner = make_planner(args.planner, args.transcript)
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
    record = run_episode(scenario, planner, Toggles(args.cbf, args.rag), args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    record.write(out)
    steps = record.total_steps - 1
    verb = "Captured in" if record.captured else "Timeout after"
    print(f"{verb} {steps} steps, {record.danger_steps} danger steps")
    print(f"record: {out}")
    return OK


def cmd_suite(args) -> int:
    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; valid ids: {', '.join(SUITES)}")
    spec = replace(SUITES[args.suite], planner=args.planner)
    if args.planner == "external":
        try:
            make_planner("external")
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
    out = Path(args.out) if args.out else Path("runs") / args.suite
    report = run_suite(spec, out, workers=args.workers, episodes=args.episodes, seed_base=args.seed_base)
    print(render_table(report))
    print(f"report: {out / 'report.json'}")
    return OK


def cmd_kb(args) -> int:
    try:
        text = Path(args.kb).read_text() if args.kb else kg.default_kb_text()
    except OSError as exc:
        raise UsageError(f"cannot read knowledge base {args.kb}: {exc}") from exc
    try:
        graph = kg.build_graph(text)
    except kg.StructureError as exc:
        print(f"invalid knowledge base: {exc.reason}")
        return CHECK_FAILED
    except kg.ParseError as exc:
        raise UsageError(f"cannot parse knowledge base: {exc}") from exc
    if args.kb_cmd == "validate":
        counts = graph.partition_counts()
        print(" ".join(f"{k}={v}" for k, v in counts.items()))
        print(f"nodes={len(graph.nodes)} edges={len(graph.edges)}")
        return OK
    terms = [t for t in (args.layer1, args.layer2, args.layer3) if t is not None]
    if not terms:
        raise UsageError("kb query needs at least --layer1")
    try:
        path = kg.retrieve(graph, kg.Query(args.subgraph, tuple(terms), args.w_sem), kg.HashEmbedder())
    except kg.NoPath as exc:
        print(f"no path: {exc}")
        return CHECK_FAILED
    for i, (node, score) in enumerate(zip(path.nodes, path.scores), start=1):
        print(f"layer {i} ({path.layer_names[i - 1]}): {node}  phi={score:.6f}")
    print(f"objective: {path.objective:.9f}")
    if any(path.relaxed):
        print("relaxed layers: " + ", ".join(str(i + 1) for i, r in enumerate(path.relaxed) if r))
    return OK


def cmd_audit(args) -> int:
    path = Path(args.path)
    if not path.is_file():
        raise UsageError(f"file not found: {path}")
    try:
        if path.suffix == ".json":
            audit_report(path)
        else:
            audit_record(EpisodeRecord.read(path))
    except AuditFailure as exc:
        print(f"audit failed at {exc.where}: {exc.detail}")
        return CHECK_FAILED
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"audit failed: malformed input ({exc})")
        return CHECK_FAILED
    print(f"audit ok: {path}")
    return OK


def cmd_report(args) -> int:
    path = Path(args.path)
    if not path.is_file():
        raise UsageError(f"report not found: {path}")
    try:
        report = SuiteReport.from_dict(json.loads(path.read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid report {path}: {exc}") from exc
    print(render_table(report))
    return OK


def cmd_scenario(args) -> int:
    if args.name not in BUILTIN_SCENARIOS:
        raise UsageError(f"unknown scenario {args.name!r}; built-ins: {', '.join(BUILTIN_SCENARIOS)}")
    text = json.dumps(BUILTIN_SCENARIOS[args.name].to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conesafe", description="Verified semantic-action pursuit simulator.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one episode and write its record")
    r.add_argument("--scenario", required=True, help="scenario JSON file or built-in name")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--cbf", action=argparse.BooleanOptionalAction, default=True)
    r.add_argument("--rag", action=argparse.BooleanOptionalAction, default=True)
    r.add_argument("--planner", choices=("scripted", "external"), default="scripted")
    r.add_argument("--strategy", choices=("straight", "matrix_game"))
    r.add_argument("--transcript", help="append endpoint calls to this JSON-lines file")
    r.add_argument("--replay", help="replay planner decisions from a transcript")
    r.add_argument("--out", default="record.jsonl")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("suite", help="run an experiment suite")
    s.add_argument("suite")
    s.add_argument("--episodes", type=int)
    s.add_argument("--seed-base", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--planner", choices=("scripted", "external"), default="scripted")
    s.add_argument("--out")
    s.set_defaults(func=cmd_suite)

    k = sub.add_parser("kb", help="validate or query a knowledge base")
    ksub = k.add_subparsers(dest="kb_cmd", required=True)
    kv = ksub.add_parser("validate")
    kv.add_argument("kb", nargs="?")
    kq = ksub.add_parser("query")
    kq.add_argument("--kb")
    kq.add_argument("--subgraph", default="policy", choices=("policy", "control"))
    kq.add_argument("--layer1")
    kq.add_argument("--layer2")
    kq.add_argument("--layer3")
    kq.add_argument("--w-sem", type=float, default=0.7)
    k.set_defaults(func=cmd_kb)

    a = sub.add_parser("audit", help="replay-check an episode record or a suite report")
    a.add_argument("path")
    a.set_defaults(func=cmd_audit)

    rp = sub.add_parser("report", help="render a suite report against reference points")
    rp.add_argument("path")
    rp.set_defaults(func=cmd_report)

    sc = sub.add_parser("scenario", help="print a built-in scenario as JSON")
    sc.add_argument("name")
    sc.add_argument("--out")
    sc.set_defaults(func=cmd_scenario)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return USAGE
    except (PlacementInfeasible, RuntimeError, OSError) as exc:
        _err(str(exc))
        return RUNTIME


if __name__ == "__main__":
    sys.exit(main())
