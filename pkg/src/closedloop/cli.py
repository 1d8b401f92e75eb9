"""Operator entry point."""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path

from .clock import VirtualClock, format_ts, parse_ts
from .config import ConfigError, load_config
from .degraded import ConnectivityStillDown
from .deployment import Deployment
from .evidence import EvidenceChain, summarize, validate_chain
from .fsm import LaneId
from .lanes import run_lane
from .locks import Contention
from .simulation import ScenarioError, ScenarioRun, bundled_scenarios, load_scenario
from .tracker import FaultProfile, SimulatedTracker

EXIT_OK = 0
EXIT_FAILED_RUN = 1
EXIT_ASSERTION = 2
EXIT_CONFIG = 3
EXIT_CHAIN = 4

TRACKER_STATE = "tracker.json"
CLOCK_STATE = "clock.json"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--state-dir", default="closedloop-state", help="deployment state directory")
    p.add_argument("--config", help="JSON config overlaid on the bundled defaults")
    p.add_argument("--tracker-fixture", help="seed the simulated tracker from this JSON fixture")
    p.add_argument("--fault-profile", help="JSON fault profile for the simulated tracker")
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    p.add_argument("--virtual-start", help="RFC 3339 start time for the virtual clock")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="closedloop", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-lane", help="execute one lane cycle")
    p.add_argument("lane", help="Lane1..Lane7 or 1..7")
    p.add_argument("--deep-sweep", action="store_true", help="Lane 4 nightly budget")
    _common(p)

    p = sub.add_parser("simulate", help="run a scripted scenario and evaluate its assertions")
    p.add_argument("scenario", nargs="?", help="scenario JSON path")
    p.add_argument("--all", action="store_true", help="run every bundled scenario")
    p.add_argument("--state-dir", help="keep scenario state here instead of a temp dir")

    p = sub.add_parser("drain", help="replay queued tracker writes (Lane 5 recovery)")
    p.add_argument("--max-calls", type=int, default=None)
    _common(p)

    p = sub.add_parser("validate-chain", help="verify the evidence hash chain")
    p.add_argument("path", nargs="?", help="chain file (defaults to the state dir chain)")
    p.add_argument("--state-dir", default="closedloop-state")

    p = sub.add_parser("report", help="summarize runs and reliability")
    p.add_argument("--state-dir", default="closedloop-state")
    p.add_argument("--alpha", type=float, default=0.05)

    p = sub.add_parser("init-fixture", help="write a sample tracker fixture")
    p.add_argument("out")
    p.add_argument("--tickets", type=int, default=10)
    p.add_argument("--project", default="KAN")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _open_deployment(args) -> Deployment:
    """Validates everything before any tracker call; raises ConfigError."""
    state = Path(args.state_dir)
    config = load_config(args.config)
    if args.virtual_start:
        try:
            start = parse_ts(args.virtual_start)
        except ValueError as exc:
            raise ConfigError(f"--virtual-start: {exc}") from None
    elif (state / CLOCK_STATE).exists():
        start = parse_ts(json.loads((state / CLOCK_STATE).read_text("utf-8"))["now"])
    else:
        start = None
    clock = VirtualClock(start)
    faults = FaultProfile()
    if args.fault_profile:
        try:
            faults = FaultProfile.load(args.fault_profile)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"fault profile: {exc}") from None
    tracker = SimulatedTracker(clock, faults)
    fixture = args.tracker_fixture or (state / TRACKER_STATE if (state / TRACKER_STATE).exists() else None)
    if fixture:
        try:
            tracker.seed(json.loads(Path(fixture).read_text("utf-8")))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"tracker fixture: {exc}") from None
    return Deployment(state, config, clock, tracker, args.seed)


def _persist(dep: Deployment) -> None:
    (dep.root / TRACKER_STATE).write_text(json.dumps(dep.tracker.dump_fixture(), indent=2), encoding="utf-8")
    (dep.root / CLOCK_STATE).write_text(json.dumps({"now": format_ts(dep.clock.now())}), encoding="utf-8")


def cmd_run_lane(args) -> int:
    try:
        lane = LaneId.parse(args.lane)
        dep = _open_deployment(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = run_lane(dep, lane, deep=args.deep_sweep)
    _persist(dep)
    if report.skipped:
        print(f"{report.run_id}: skipped, lane lock held")
        return EXIT_OK
    print(f"{report.run_id}: {report.terminal_status.value}")
    for a in report.alerts:
        print(f"  alert: {a}")
    for k, v in sorted(report.counters.items()):
        print(f"  {k}: {v}")
    if report.error:
        print(f"  error: {report.error}")
    return report.exit_code


def cmd_simulate(args) -> int:
    paths = bundled_scenarios() if args.all else [Path(args.scenario)] if args.scenario else []
    if not paths:
        print("simulate: give a scenario path or --all", file=sys.stderr)
        return EXIT_CONFIG
    failed = False
    for path in paths:
        try:
            scenario = load_scenario(path)
            if args.state_dir:
                state = Path(args.state_dir) / scenario.name if len(paths) > 1 else Path(args.state_dir)
                report = ScenarioRun(scenario, state).execute()
            else:
                import tempfile

                with tempfile.TemporaryDirectory(prefix="closedloop-") as tmp:
                    report = ScenarioRun(scenario, tmp).execute()
        except ScenarioError as exc:
            print(f"scenario error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(report.to_text())
        failed = failed or not report.passed
    return EXIT_ASSERTION if failed else EXIT_OK


def cmd_drain(args) -> int:
    try:
        dep = _open_deployment(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = dep.coordinator.drain(dep.tracker, args.max_calls or dep.config.drain_batch,
                                       locks=dep.locks, owner="cli-drain")
    except ConnectivityStillDown as exc:
        print(f"tracker still down, nothing consumed: {exc}")
        return EXIT_FAILED_RUN
    except Contention as exc:
        print(f"drain already running: {exc}")
        return EXIT_FAILED_RUN
    finally:
        _persist(dep)
    print(report.summary)
    return EXIT_OK


def cmd_validate_chain(args) -> int:
    path = Path(args.path) if args.path else Path(args.state_dir) / "evidence" / "chain.jsonl"
    result = validate_chain(path)
    print(result)
    if result.tip_mismatch:
        print(f"tip sidecar records {result.tip_length} record(s); chain file has {result.length}")
    return EXIT_OK if result.valid else EXIT_CHAIN


def cmd_report(args) -> int:
    chain = EvidenceChain(Path(args.state_dir) / "evidence" / "chain.jsonl")
    check = chain.validate()
    if not check.valid:
        print(f"chain invalid: {check}")
        return EXIT_CHAIN
    s = summarize(chain.records())
    print(f"runs: {s.runs} (clean {s.clean}, degraded {s.degraded}, failed {s.failed})")
    for lane, n in sorted(s.by_lane.items()):
        print(f"  {lane}: {n}")
    est = s.reliability(args.alpha)
    if est:
        print(f"terminal-state success: {est}")
    return EXIT_OK


def cmd_init_fixture(args) -> int:
    rng = random.Random(args.seed)
    verbs = ["Fix", "Harden", "Remove", "Refactor", "Document"]
    nouns = ["login form", "settings button", "report export", "audit log", "session timeout", "upload path"]
    tickets = []
    for i in range(1, args.tickets + 1):
        summary = f"{rng.choice(verbs)} {rng.choice(nouns)}"
        tickets.append({"key": f"{args.project}-{i}", "summary": summary, "description": "", "status": "ToDo",
                        "labels": [], "comments": [], "transition_log": [], "created_at": None})
    Path(args.out).write_text(json.dumps(tickets, indent=2), encoding="utf-8")
    print(f"wrote {len(tickets)} ticket(s) to {args.out}")
    return EXIT_OK


COMMANDS = {
    "run-lane": cmd_run_lane,
    "simulate": cmd_simulate,
    "drain": cmd_drain,
    "validate-chain": cmd_validate_chain,
    "report": cmd_report,
    "init-fixture": cmd_init_fixture,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
