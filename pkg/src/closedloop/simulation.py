"""Scripted fault scenarios: schedule execution against a simulated deployment, then named checks."""

from __future__ import annotations

import copy
import json
import re
import tempfile
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Callable

from .backlog import BacklogItem
from .clock import VirtualClock, format_ts, parse_ts
from .config import ConfigError, load_config
from .degraded import ConnectivityStillDown
from .deployment import Deployment, RunReport
from .fsm import LaneId, TicketStatus, TransitionId, is_legal_path
from .lanes import run_lane
from .locks import Contention, Lock, ProcessTable
from .matcher import FixQueueEntry, write_fix_queue
from .publisher import DIGEST_PREFIX, OutcomeKind, PublishAction, PublishItem
from .tracker import FaultProfile, SimulatedTracker, TrackerError, TransitionRejected

ACTIONS = {"lane", "outage", "drain", "claim_race", "publish", "lose_receipts", "hold_lock", "kill_pid",
           "reopen_attempt", "fix_queue"}


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "") -> None:
        where = f"{source}:{line}: " if line is not None else (f"{source}: " if source else "")
        super().__init__(f"{where}{message}")
        self.line = line


def _line_of(text: str, needle: str) -> int | None:
    for n, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return n
    return None


@dataclass
class ScheduleEntry:
    at: timedelta
    action: str
    args: dict[str, Any]
    index: int


@dataclass
class Scenario:
    name: str
    raw: dict
    schedule: list[ScheduleEntry]
    assertions: list[dict]
    base_dir: Path = Path(".")
    text: str = ""

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def virtual_start(self) -> str:
        return self.raw.get("virtual_start", "2026-03-02T08:00:00Z")

    def resolve(self, value):
        """Inline JSON value or a path relative to the scenario file."""
        if isinstance(value, str):
            return json.loads((self.base_dir / value).read_text("utf-8"))
        return value


def parse_scenario(text: str, source: str = "<scenario>", base_dir: Path | None = None) -> Scenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, exc.lineno, source) from None
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a JSON object", 1, source)
    if "name" not in raw:
        raise ScenarioError("missing 'name'", 1, source)
    schedule = []
    for i, entry in enumerate(raw.get("schedule", [])):
        if not isinstance(entry, dict):
            raise ScenarioError(f"schedule[{i}] must be an object", _line_of(text, '"schedule"'), source)
        action = entry.get("action", "lane" if "lane" in entry else None)
        if action not in ACTIONS:
            raise ScenarioError(f"schedule[{i}]: unknown action {action!r}", _line_of(text, f'"{action}"'), source)
        if action == "lane":
            try:
                LaneId.parse(entry.get("lane", ""))
            except ValueError:
                raise ScenarioError(f"schedule[{i}]: bad lane {entry.get('lane')!r}",
                                    _line_of(text, str(entry.get("lane"))), source) from None
        try:
            at = timedelta(minutes=float(entry.get("at_minutes", 0)))
        except (TypeError, ValueError):
            raise ScenarioError(f"schedule[{i}]: at_minutes must be a number",
                                _line_of(text, str(entry.get("at_minutes"))), source) from None
        args = {k: v for k, v in entry.items() if k not in ("at_minutes", "action")}
        schedule.append(ScheduleEntry(at, action, args, i))
    assertions = raw.get("assertions", [])
    for a in assertions:
        if a.get("check") not in CHECKS:
            raise ScenarioError(f"unknown check {a.get('check')!r}", _line_of(text, f'"{a.get("check")}"'), source)
    schedule.sort(key=lambda e: (e.at, e.index))
    return Scenario(raw["name"], raw, schedule, assertions, base_dir or Path("."), text)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except FileNotFoundError:
        raise ScenarioError("file not found", source=str(path)) from None
    return parse_scenario(text, str(path), path.parent)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ScenarioReport:
    name: str
    results: list[CheckResult] = field(default_factory=list)
    runs: list[RunReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_text(self) -> str:
        lines = [f"scenario {self.name}: {len(self.runs)} lane run(s), {len(self.results)} assertion(s)"]
        for r in self.results:
            lines.append(f"  [{'PASS' if r.passed else 'FAIL'}] {r.name}" + (f": {r.detail}" if r.detail else ""))
        return "\n".join(lines)


class ScenarioRun:
    """Executes one scenario in a state directory."""

    def __init__(self, scenario: Scenario, state_dir: str | Path, baseline: bool = False) -> None:
        self.scenario = scenario
        self.baseline = baseline
        raw = scenario.raw
        self.clock = VirtualClock(scenario.virtual_start)
        self.start = self.clock.now()
        faults = FaultProfile.from_json(scenario.resolve(raw["fault_profile"])) if raw.get("fault_profile") else FaultProfile()
        if baseline:
            faults = FaultProfile(rng_seed=faults.rng_seed)
        self.tracker = SimulatedTracker(self.clock, faults)
        fixture = scenario.resolve(raw.get("fixture", []))
        self.tracker.seed(_relative_fixture(fixture, self.start))
        try:
            config = load_config(overrides=raw.get("config", {}))
        except ConfigError as exc:
            raise ScenarioError(f"config: {exc}", _line_of(scenario.text, '"config"'), scenario.name) from None
        self.processes = ProcessTable()
        self.dep = Deployment(state_dir, config, self.clock, self.tracker, scenario.seed, liveness=self.processes)
        self.log: list[dict] = []
        self._seed_state(raw)

    def _seed_state(self, raw: dict) -> None:
        dep = self.dep
        for name, body in raw.get("sources", {}).items():
            dep.sources.mkdir(parents=True, exist_ok=True)
            (dep.sources / name).write_text(body, encoding="utf-8")
        if raw.get("backlog"):
            for rec in raw["backlog"]:
                dep.backlog.upsert(BacklogItem.from_record(rec))
            dep.backlog.commit("scenario-seed", self.start, "seeded backlog")
        if "fix_queue" in raw:
            write_fix_queue(dep.fix_queue_path, [FixQueueEntry.from_record(r) for r in raw["fix_queue"]])
        for key, path in (("audit_input", dep.audit_input), ("spec_observations", dep.spec_input)):
            if key in raw:
                path.write_text(json.dumps(raw[key]), encoding="utf-8")

    def execute(self) -> ScenarioReport:
        skip = set(self.scenario.raw.get("baseline", {}).get("remove_actions", [])) if self.baseline else set()
        for entry in self.scenario.schedule:
            if entry.action in skip:
                continue
            self.clock.advance_to(self.start + entry.at)
            getattr(self, f"_do_{entry.action}")(entry.args)
        report = ScenarioReport(self.scenario.name, runs=list(self.dep.history))
        if not self.baseline:
            for spec in self.scenario.assertions:
                name = spec.get("name", spec["check"])
                try:
                    passed, detail = CHECKS[spec["check"]](self, spec)
                except Exception as exc:  # noqa: BLE001 - a crashing check is a failed assertion
                    passed, detail = False, f"check raised {type(exc).__name__}: {exc}"
                report.results.append(CheckResult(name, passed, detail))
        return report

    # actions

    def _do_lane(self, args: dict) -> None:
        r = run_lane(self.dep, args["lane"], deep=bool(args.get("deep", False)))
        self.log.append({"type": "lane", "lane": r.lane.value, "status": r.terminal_status.value if r.terminal_status else None,
                         "exit": r.exit_code, "skipped": r.skipped})

    def _do_outage(self, args: dict) -> None:
        self.tracker.forced_down = bool(args.get("down", True))

    def _do_drain(self, args: dict) -> None:
        try:
            d = self.dep.coordinator.drain(self.tracker, int(args.get("max_calls", self.dep.config.drain_batch)),
                                           locks=self.dep.locks, owner="operator-drain")
        except ConnectivityStillDown as exc:
            self.log.append({"type": "drain", "still_down": True, "error": str(exc)})
            return
        except Contention as exc:
            self.log.append({"type": "drain", "contention": True, "error": str(exc)})
            return
        self.log.append({"type": "drain", "replayed": [[i.partition.value, i.seq, format_ts(i.enqueued_at)] for i in d.replayed],
                         "dropped": [[i.partition.value, i.seq, why] for i, why in d.dropped],
                         "remaining": d.remaining, "status_after": d.status_after.value})

    def _do_claim_race(self, args: dict) -> None:
        key, agents = args["ticket"], int(args.get("agents", 3))
        barrier = threading.Barrier(agents)
        results: dict[str, str] = {}

        def agent(i: int) -> None:
            name = f"agent-{i + 1}"
            barrier.wait()
            try:
                self.tracker.transition(key, TransitionId.IN_PROGRESS, LaneId.LANE4, TicketStatus.TODO, name)
                results[name] = "claimed"
            except TransitionRejected as exc:
                results[name] = f"skipped: {exc.reason.value}"

        threads = [threading.Thread(target=agent, args=(i,)) for i in range(agents)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        self.log.append({"type": "claim_race", "ticket": key, "results": results})

    def _do_publish(self, args: dict) -> None:
        lane = LaneId.parse(args.get("lane", "Lane6"))
        pub = self.dep.publisher(lane, args.get("run_id", "publish-run"))
        cache: set = set()
        for _ in range(int(args.get("repeat", 1))):
            if args.get("fresh_cache_each_pass"):
                cache = set()
            for spec in args["items"]:
                action = PublishAction.comment()
                if "transition" in spec:
                    action = PublishAction.move(TransitionId(spec["transition"]), TicketStatus(spec["expected_from"]),
                                                bool(spec.get("verified", False)))
                item = PublishItem(spec["ticket"], spec.get("run_id", args.get("run_id", "publish-run")),
                                   spec.get("body", ""), action, spec.get("permalink", ""))
                out = pub.publish(item, cache)
                self.log.append({"type": "publish", "ticket": item.ticket_key, "outcome": out.kind.value,
                                 "layer": out.layer.value if out.layer else None, "reason": out.reason})
            if args.get("lose_receipts_between_passes"):
                self._do_lose_receipts({})
                pub.receipts = self.dep.receipts

    def _do_lose_receipts(self, args: dict) -> None:
        from .publisher import ReceiptLog

        path = self.dep.receipts.path
        path.unlink(missing_ok=True)
        self.dep.receipts = ReceiptLog(path, self.clock, self.dep.locks, self.dep.receipts.backoff)
        self.log.append({"type": "lose_receipts"})

    def _do_hold_lock(self, args: dict) -> None:
        lock = self.dep.locks.acquire(args["resource"], args.get("owner", "other"),
                                      timedelta(seconds=float(args.get("ttl_seconds", 60))), self.clock.now(),
                                      pid=int(args.get("pid", 424242)))
        self.log.append({"type": "hold_lock", "resource": lock.resource, "owner": lock.owner})

    def _do_kill_pid(self, args: dict) -> None:
        self.processes.kill(int(args["pid"]))

    def _do_reopen_attempt(self, args: dict) -> None:
        key = args["ticket"]
        current = self.tracker.peek(key).status
        try:
            self.tracker.transition(key, TransitionId.IN_PROGRESS, LaneId.LANE6, current, "reopen-attempt")
            outcome = "accepted"
        except TransitionRejected as exc:
            outcome = f"rejected: {exc}"
        self.log.append({"type": "reopen_attempt", "ticket": key, "outcome": outcome})

    def _do_fix_queue(self, args: dict) -> None:
        write_fix_queue(self.dep.fix_queue_path, [FixQueueEntry.from_record(r) for r in args["entries"]])


def _relative_fixture(fixture: list[dict], start: datetime) -> list[dict]:
    """Fixture timestamps may be written as hour offsets: {"hours_ago": 11}."""
    out = []
    for raw in copy.deepcopy(fixture):
        for field_name in ("created_at",):
            if isinstance(raw.get(field_name), dict):
                raw[field_name] = format_ts(start - timedelta(hours=float(raw[field_name]["hours_ago"])))
        for entry in raw.get("transition_log", []):
            if isinstance(entry.get("timestamp"), dict):
                entry["timestamp"] = format_ts(start - timedelta(hours=float(entry["timestamp"]["hours_ago"])))
        out.append(raw)
    return out


def run_scenario(scenario: Scenario | str | Path, state_dir: str | Path | None = None) -> ScenarioReport:
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    if state_dir is None:
        with tempfile.TemporaryDirectory(prefix="closedloop-") as tmp:
            return ScenarioRun(scenario, tmp).execute()
    return ScenarioRun(scenario, state_dir).execute()


# checks


def _all_events(run: ScenarioRun, lane: str | None = None) -> list[dict]:
    out = []
    for r in run.dep.history:
        if lane and r.lane.value != lane:
            continue
        for e in r.events:
            out.append({**e, "lane": r.lane.value})
    return out


def _compare(value: float, spec: dict) -> tuple[bool, str]:
    if "equals" in spec and value != spec["equals"]:
        return False, f"got {value}, expected {spec['equals']}"
    if "min" in spec and value < spec["min"]:
        return False, f"got {value}, expected >= {spec['min']}"
    if "max" in spec and value > spec["max"]:
        return False, f"got {value}, expected <= {spec['max']}"
    return True, f"{value}"


def check_ticket_status(run, spec):
    status = run.tracker.peek(spec["ticket"]).status.value
    return status == spec["equals"], f"{spec['ticket']} is {status}"


def check_transitions(run, spec):
    log = [int(e.transition_id) for e in run.tracker.peek(spec["ticket"]).transition_log]
    return log == spec["equals"], f"{spec['ticket']} transitions {log}"


def check_single_claim(run, spec):
    key = spec["ticket"]
    claims = sum(1 for e in run.tracker.peek(key).transition_log if e.transition_id is TransitionId.IN_PROGRESS)
    races = [e for e in run.log if e["type"] == "claim_race" and e["ticket"] == key]
    winners = sum(1 for e in races for v in e["results"].values() if v == "claimed")
    ok = claims == 1 and winners == 1
    return ok, f"{claims} claim(s) in transition log, {winners} race winner(s)"


def check_legal_paths(run, spec):
    bad = []
    for key in run.tracker.keys():
        entries = [(e.transition_id, e.actor, e.verified) for e in run.tracker.peek(key).transition_log]
        if not is_legal_path(entries):
            bad.append(key)
    return not bad, f"illegal paths: {bad}" if bad else "all paths legal"


def _digests(ticket) -> list[str]:
    return [line for c in ticket.comments for line in c.body.splitlines() if line.startswith(DIGEST_PREFIX)]


def check_no_duplicate_posts(run, spec):
    dupes = []
    for key in run.tracker.keys():
        d = _digests(run.tracker.peek(key))
        if len(d) != len(set(d)):
            dupes.append(key)
    return not dupes, f"duplicates on {dupes}" if dupes else "every digest posted once"


def check_comment_count(run, spec):
    n = len(run.tracker.peek(spec["ticket"]).comments)
    return _compare(n, spec)


def check_publish_outcomes(run, spec):
    events = [e for e in run.log if e["type"] == "publish"]
    events += [{"outcome": e["outcome"], "layer": e.get("layer")} for e in _all_events(run) if e["type"] == "publish"]
    n = sum(1 for e in events if e["outcome"] == spec["kind"] and (spec.get("layer") is None or e.get("layer") == spec["layer"]))
    return _compare(n, spec)


def check_connectivity(run, spec):
    status = run.dep.coordinator.status().status.value
    return status == spec["equals"], f"connectivity {status}"


def check_queues_empty(run, spec):
    pending = run.dep.coordinator.pending()
    return not pending, f"{len(pending)} intent(s) pending"


def _drain_batches(run) -> list[list]:
    batches = [e["replayed"] + [[p, s, None] for p, s, _ in e["dropped"]] for e in run.log if e["type"] == "drain" and "replayed" in e]
    batches += [e["replayed"] + [[p, s, None] for p, s, _ in e["dropped"]] for e in _all_events(run) if e["type"] == "drain"]
    return batches


def check_drains_bounded(run, spec):
    limit = int(spec.get("max", 20))
    batches = _drain_batches(run)
    if spec.get("min_drains") and len(batches) < spec["min_drains"]:
        return False, f"only {len(batches)} drain(s)"
    for b in batches:
        if len(b) > limit:
            return False, f"drain consumed {len(b)} > {limit}"
        stamps = [parse_ts(x[2]) for x in b if x[2]]
        if stamps != sorted(stamps):
            return False, "drain replay not oldest-first"
    return True, f"{len(batches)} drain(s), sizes {[len(b) for b in batches]}"


def check_no_intent_lost(run, spec):
    acct = run.dep.coordinator.accounting()
    for part, a in acct.items():
        if a["issued"] != a["replayed"] + a["dropped"] + a["pending"]:
            return False, f"{part}: {a}"
    issued = sum(a["issued"] for a in acct.values())
    if spec.get("min_issued") and issued < spec["min_issued"]:
        return False, f"only {issued} intent(s) issued"
    return True, json.dumps(acct, sort_keys=True)


def check_parity(run, spec):
    with tempfile.TemporaryDirectory(prefix="closedloop-baseline-") as tmp:
        base = ScenarioRun(run.scenario, tmp, baseline=True)
        base.execute()
        expected = base.tracker.canonical_state()
    actual = run.tracker.canonical_state()
    ignore = set(spec.get("ignore_tickets", []))
    expected = [t for t in expected if t["key"] not in ignore]
    actual = [t for t in actual if t["key"] not in ignore]
    if expected == actual:
        return True, f"{len(actual)} ticket(s) identical to no-outage baseline"
    for e, a in zip(expected, actual):
        if e != a:
            return False, f"first difference on {e['key']}"
    return False, f"ticket count {len(actual)} vs baseline {len(expected)}"


def check_chain_valid(run, spec):
    v = run.dep.chain.validate()
    return v.valid and not v.tip_mismatch, str(v)


def _alerts(run) -> list[dict]:
    return [e for e in _all_events(run, "Lane5") if e["type"] == "alert"]


def check_alert(run, spec):
    hits = [a for a in _alerts(run)
            if a["category"] == spec["category"]
            and (spec.get("severity") is None or a["severity"] == spec["severity"])
            and (spec.get("subject") is None or a["subject"] == spec["subject"])]
    if spec.get("absent"):
        return not hits, f"{len(hits)} matching alert(s)"
    return bool(hits), f"{len(hits)} matching alert(s)"


def check_digest_mentions(run, spec):
    texts = [p.read_text("utf-8") for p in sorted(run.dep.digests.directory.glob("digest-*.md"))]
    ok = any(spec["text"] in t for t in texts)
    return ok, f"{len(texts)} digest(s)"


def check_digest_count(run, spec):
    return _compare(len(list(run.dep.digests.directory.glob("digest-*.md"))), spec)


def check_run_event(run, spec):
    events = [e for e in _all_events(run, spec.get("lane")) if e["type"] == spec["type"]]
    for k, v in spec.get("where", {}).items():
        events = [e for e in events if e.get(k) == v]
    for k, bound in spec.get("field_max", {}).items():
        over = [e for e in events if e.get(k) is not None and e[k] > bound]
        if over:
            return False, f"{k}={over[0][k]} exceeds {bound}"
    return _compare(len(events), spec)


def check_run_status(run, spec):
    runs = [r for r in run.dep.history if r.lane.value == spec["lane"] and not r.skipped]
    if not runs:
        return False, "no runs"
    r = runs[int(spec.get("index", -1))]
    status = r.terminal_status.value
    return status == spec["equals"], f"{r.run_id} {status}"


def check_all_exit_zero(run, spec):
    bad = [r.run_id for r in run.dep.history if r.exit_code != 0]
    return not bad, f"non-zero: {bad}" if bad else f"{len(run.dep.history)} run(s) exit 0"


def check_workspace_absent(run, spec):
    path = run.dep.worktrees.path_for(spec["ticket"])
    return not path.exists(), f"{path.name} {'present' if path.exists() else 'discarded'}"


def check_fallback_notes(run, spec):
    return _compare(run.dep.coordinator.fallback_notes().count("## Note "), spec)


def check_receipts(run, spec):
    return _compare(len(run.dep.receipts.receipts()), spec)


def check_reopen_rejected(run, spec):
    attempts = [e for e in run.log if e["type"] == "reopen_attempt"]
    ok = bool(attempts) and all(e["outcome"].startswith("rejected") for e in attempts)
    return ok, f"{len(attempts)} attempt(s): {[e['outcome'] for e in attempts]}"


def check_receipt_retries(run, spec):
    return _compare(run.dep.receipts.contention_retries, spec)


def check_fault_events(run, spec):
    n = sum(1 for f in run.tracker.fault_trace if f.fault == spec["fault"])
    return _compare(n, spec)


def check_run_counter(run, spec):
    runs = [r for r in run.dep.history if r.lane.value == spec["lane"] and not r.skipped]
    if not runs:
        return False, "no runs"
    return _compare(runs[int(spec.get("index", -1))].counters.get(spec["counter"], 0), spec)


def check_lock_free(run, spec):
    holder = run.dep.locks.holder(spec["resource"])
    return holder is None, f"holder {holder.owner if holder else None}"


CHECKS: dict[str, Callable[[ScenarioRun, dict], tuple[bool, str]]] = {
    "ticket_status": check_ticket_status,
    "transitions": check_transitions,
    "single_claim": check_single_claim,
    "legal_paths": check_legal_paths,
    "no_duplicate_posts": check_no_duplicate_posts,
    "comment_count": check_comment_count,
    "publish_outcomes": check_publish_outcomes,
    "connectivity": check_connectivity,
    "queues_empty": check_queues_empty,
    "drains_bounded": check_drains_bounded,
    "no_intent_lost": check_no_intent_lost,
    "parity": check_parity,
    "chain_valid": check_chain_valid,
    "alert": check_alert,
    "digest_mentions": check_digest_mentions,
    "digest_count": check_digest_count,
    "run_event": check_run_event,
    "run_status": check_run_status,
    "all_exit_zero": check_all_exit_zero,
    "workspace_absent": check_workspace_absent,
    "fallback_notes": check_fallback_notes,
    "receipts": check_receipts,
    "reopen_rejected": check_reopen_rejected,
    "receipt_retries": check_receipt_retries,
    "fault_events": check_fault_events,
    "lock_free": check_lock_free,
    "run_counter": check_run_counter,
}


def bundled_scenarios() -> list[Path]:
    from importlib import resources

    root = resources.files("closedloop.scenarios")
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".json"))
