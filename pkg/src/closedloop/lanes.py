"""The seven lane cycles. Each cycle holds its lane lock and appends one evidence record."""

from __future__ import annotations

import heapq
import json
import logging
import random
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable

from .backlog import BacklogItem, ValidationFailure, intake_documents, reconcile_statuses, validate_item
from .clock import VirtualClock, format_ts
from .degraded import CallKind, GuardAction, TrackerCall
from .deployment import Deployment, RunReport
from .evidence import TerminalStatus, classify_run, digest_bytes, permalink
from .fsm import LaneId, TicketStatus, TransitionId
from .locks import Contention, NotHeld
from .matcher import ConfidenceTier, FixQueueEntry, MatchIndex, match_item, read_fix_queue, tier, write_fix_queue
from .publisher import OutcomeKind, PublishAction, PublishItem, PublishOutcome, Publisher, route_outcome
from .scheduler import (
    ClaimQueue,
    MutatedStateFailure,
    OutcomeStatus,
    PlanKind,
    ScrutinyTier,
    Verdict,
    plan_workers,
    run_with_budget,
    scrutiny_tier,
    tree_digest,
    verify_workspace,
)
from .tracker import RejectReason, TrackerError, TransitionRejected
from .watchdog import run_watch

logger = logging.getLogger(__name__)


@dataclass
class RunContext:
    dep: Deployment
    lane: LaneId
    run_id: str
    started_at: datetime
    alerts: list[str] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=dict)
    exceptions: int = 0
    run_cache: set = field(default_factory=set)
    _publisher: Publisher | None = None

    @property
    def now(self) -> datetime:
        return self.dep.clock.now()

    @property
    def permalink(self) -> str:
        return permalink(self.run_id, len(self.dep.chain))

    def event(self, kind: str, **fields) -> None:
        self.events.append({"type": kind, "at": format_ts(self.now), **fields})

    def count(self, name: str, n: int = 1) -> None:
        self.counters[name] = self.counters.get(name, 0) + n

    def alert(self, text: str) -> None:
        self.alerts.append(text)

    def call(self, call: TrackerCall):
        def on_retry(attempt, delay, exc):
            self.count("retries")
            self.event("retry", attempt=attempt, delay_seconds=round(delay, 6), error=str(exc))

        result = self.dep.tracker_call(self.lane, call, on_retry)
        if result.decision.action is not GuardAction.PROCEED:
            self.count(f"guard_{result.decision.action.value}")
            if result.decision.intent is not None:
                intent = result.decision.intent
                self.event("intent", action=result.decision.action.value, partition=intent.partition.value,
                           seq=intent.seq, call=intent.kind.value)
        return result

    @property
    def publisher(self) -> Publisher:
        if self._publisher is None:
            self._publisher = self.dep.publisher(self.lane, self.run_id)
        return self._publisher

    def publish(self, key: str, body: str, action: PublishAction | None = None) -> PublishOutcome:
        item = PublishItem(key, self.run_id, body, action or PublishAction.comment(), self.permalink)
        outcome = self.publisher.publish(item, self.run_cache)
        self.count(f"publish_{outcome.kind.value}")
        fields = {"key": key, "outcome": outcome.kind.value, "digest": item.content_digest}
        if outcome.layer:
            fields["layer"] = outcome.layer.value
        if outcome.reason:
            fields["reason"] = outcome.reason
        self.event("publish", **fields)
        if outcome.receipt is not None:
            self.outputs.append(digest_bytes(json.dumps(outcome.receipt.to_json(), sort_keys=True).encode()))
        if outcome.kind is OutcomeKind.FAILED:
            self.exceptions += 1
        return outcome


# Lane 1: intake and tracker sync


def _labels_index(tickets) -> dict[str, str]:
    out = {}
    for t in tickets:
        for label in t.labels:
            if label.startswith("src-"):
                out.setdefault(label, t.key)
    return out


def lane1(ctx: RunContext) -> None:
    dep = ctx.dep
    docs = sorted(p for p in dep.sources.glob("*") if p.suffix in (".md", ".txt")) if dep.sources.exists() else []
    result = intake_documents(docs, dep.backlog, dep.fingerprints, ctx.now)
    dep.fingerprints.save()
    ctx.inputs += [fp.digest for fp in result.fingerprints]
    ctx.count("intake_new", len(result.new_items))
    ctx.count("intake_skipped_documents", len(result.skipped_documents))
    for ref, exc in result.rejected:
        ctx.alert(f"intake rejected {Path(ref).name}: {exc}")
    changed = bool(result.new_items or result.updated_items)
    summary = [f"{len(result.new_items)} new", f"{len(result.updated_items)} updated"]

    res = ctx.call(TrackerCall.search(f"key ^ {dep.config.project}-"))
    if res.executed:
        by_label = _labels_index(res.value)
        linked = 0
        for item in dep.backlog:
            if item.tracker_key is None and item.source_label in by_label:
                dep.backlog.assign_tracker_key(item.id, by_label[item.source_label])
                linked += 1
        changes = reconcile_statuses(dep.backlog, {t.key: t.status for t in res.value})
        ctx.count("linked", linked)
        ctx.count("status_changes", len(changes))
        changed = changed or bool(linked or changes)
        summary.append(f"{len(changes)} status changes")

    pending_labels = {
        label
        for intent in dep.coordinator.pending()
        if intent.kind is CallKind.CREATE
        for label in intent.payload.args.get("labels", [])
    }
    created = 0
    for item in dep.backlog:
        if item.tracker_key is not None or item.status is TicketStatus.DONE or item.source_label in pending_labels:
            continue
        r = ctx.call(TrackerCall.create(
            dep.config.project, item.title, item.description,
            [item.source_label, *sorted(item.tags)], ctx.run_id,
        ))
        if r.executed:
            dep.backlog.assign_tracker_key(item.id, r.value.key)
            created += 1
            ctx.event("created", item=item.id, key=r.value.key)
    ctx.count("created", created)
    if changed or created:
        summary.append(f"{created} tickets created")
        info = dep.backlog.commit(ctx.run_id, ctx.now, ", ".join(summary))
        ctx.outputs.append(digest_bytes((dep.backlog.root / info.file).read_bytes()))


# Lane 2: read-only codebase audit


def _read_json(path: Path, default):
    if not path.exists():
        return default
    return json.loads(path.read_text("utf-8"))


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def _note_fallback(ctx: RunContext, title: str, description: str) -> None:
    """Lanes without write authority only leave notes when degraded."""
    if not ctx.dep.coordinator.degraded:
        return
    decision = ctx.dep.coordinator.guard_call(
        ctx.lane, TrackerCall.create(ctx.dep.config.project, title, description, run_id=ctx.run_id)
    )
    if decision.action is GuardAction.NOTED_ONLY:
        ctx.count("fallback_notes")
        ctx.event("fallback_note", seq=decision.intent.seq, title=title)


def lane2(ctx: RunContext) -> None:
    dep = ctx.dep
    before = tree_digest(dep.repo)
    ctx.inputs.append(before)
    observed = _read_json(dep.audit_input, [])
    existing = {f["id"] for f in _read_json(dep.findings_path, [])}
    findings = [f for f in observed if f.get("id") and f["id"] not in dep.backlog]
    fresh = [f for f in findings if f["id"] not in existing]
    _write_json(dep.findings_path, findings)
    ctx.outputs.append(digest_bytes(dep.findings_path.read_bytes()))
    ctx.count("findings", len(findings))
    ctx.count("new_findings", len(fresh))
    for f in fresh:
        _note_fallback(ctx, f.get("title", f["id"]), f.get("description", ""))
    if tree_digest(dep.repo) != before:
        raise MutatedStateFailure("lane2-repo", before, tree_digest(dep.repo))


# Lane 3: grooming and fix-queue construction


def lane3(ctx: RunContext) -> None:
    dep = ctx.dep
    findings = _read_json(dep.findings_path, [])
    ctx.inputs.append(digest_bytes(json.dumps(findings, sort_keys=True).encode()))
    index = MatchIndex(list(dep.backlog))
    added = merged = 0
    for raw in findings:
        try:
            item = validate_item(raw)
        except ValidationFailure as exc:
            ctx.alert(f"finding {raw.get('id', '?')} rejected: {exc}")
            continue
        if item.id in dep.backlog:
            continue
        m = match_item(item, index, dep.config.thresholds)
        if m.matched_item is not None and m.confidence_tier is ConfidenceTier.AUTONOMOUS:
            merged += 1
            ctx.event("merged", finding=item.id, into=m.matched_item.id, tier=m.tier_used.value)
            continue
        if m.matched_item is not None:
            item.confidence = round(m.effective_score, 6)
            item.extra["review_of"] = m.matched_item.id
        dep.backlog.add(item)
        added += 1
    if findings:
        _write_json(dep.findings_path, [])
    if added:
        dep.backlog.commit(ctx.run_id, ctx.now, f"groomed {added} findings, merged {merged}")
    ctx.count("groomed", added)
    ctx.count("merged", merged)

    res = ctx.call(TrackerCall.search("status = ToDo"))
    if not res.executed:
        ctx.event("fix_queue_kept", reason="tracker unavailable")
        return
    entries: list[FixQueueEntry] = []
    for t in res.value:
        item = dep.backlog.by_tracker_key(t.key)
        if item is None:
            continue
        conf = item.confidence if item.confidence is not None else 1.0
        band = tier(conf, dep.config.thresholds)
        if band is ConfidenceTier.HUMAN_REVIEW:
            ctx.publish(
                t.key,
                f"Mapping confidence {conf:.2f} needs human review before any autonomous fix.",
                PublishAction.move(TransitionId.ON_HOLD, TicketStatus.TODO),
            )
            continue
        if band is ConfidenceTier.AUTONOMOUS and dep.config.families.is_authorized(item.family):
            entries.append(FixQueueEntry(
                ticket_key=t.key,
                priority_score=float((6 - item.priority) * 20),
                priority_type=str(item.extra.get("priority_type", item.family.value.lower())),
                relevant_paths=list(item.extra.get("relevant_paths", [])),
                area=str(item.extra.get("area", "")),
                confidence=conf,
            ))
    write_fix_queue(dep.fix_queue_path, entries)
    ctx.outputs.append(digest_bytes(dep.fix_queue_path.read_bytes()))
    cfg = dep.config.lane(LaneId.LANE3)
    plan = plan_workers(len(entries), cfg.max_workers, cfg.budget, cfg.t_avg)
    ctx.count("fix_queue", len(entries))
    ctx.count("workers", plan.workers)


# Lane 4: fixer with worker pool and time budgets


def _claim(ctx: RunContext, key: str, owner: str) -> bool:
    dep = ctx.dep
    claim = TrackerCall.transition(key, TransitionId.IN_PROGRESS, LaneId.LANE4, TicketStatus.TODO, ctx.run_id)
    if dep.coordinator.degraded:
        try:
            dep.coordinator.degraded_claim(key, owner)
        except Contention:
            ctx.count("collisions")
            ctx.event("collision", key=key, worker=owner, offline=True)
            return False
        ctx.call(claim)
        ctx.event("claimed", key=key, worker=owner, offline=True)
        return True
    try:
        res = ctx.call(claim)
    except TransitionRejected as exc:
        ctx.count("collisions")
        ctx.event("collision", key=key, worker=owner, reason=str(exc))
        return False
    if not res.executed:
        # outage hit exactly at claim time; fall back to the local lock
        try:
            dep.coordinator.degraded_claim(key, owner)
        except Contention:
            return False
    ctx.event("claimed", key=key, worker=owner, offline=not res.executed)
    return True


def _finish(ctx: RunContext, key: str, ws, task, outcome) -> None:
    dep = ctx.dep
    now = ctx.now
    if outcome.status is OutcomeStatus.COMPLETED and task.report is not None:
        band = scrutiny_tier(task.report.diff_lines)
        ctx.event("fixed", key=key, diff_lines=task.report.diff_lines, scrutiny=band.value,
                  elapsed_seconds=outcome.elapsed.total_seconds())
        if band is ScrutinyTier.HUMAN_REVIEW:
            dep.worktrees.discard(ws)
            ctx.publish(key, f"Diff of {task.report.diff_lines} lines exceeds the autonomous limit; human review.",
                        PublishAction.move(TransitionId.ON_HOLD, TicketStatus.IN_PROGRESS))
            dep.window.bump("human_review_escalations", now)
            return
        dep.write_ready(key, {"key": key, "workspace": ws.id, "run_id": ctx.run_id,
                              "diff_lines": task.report.diff_lines, "scrutiny": band.value})
        ctx.publish(key, f"Fix applied in isolated worktree ({task.report.diff_lines} lines, {band.value} scrutiny).")
        dep.window.bump("autonomous_fixes", now)
        ctx.count("fixed")
        return
    dep.worktrees.discard(ws)
    kind = "budget_exhausted" if outcome.status is OutcomeStatus.BUDGET_EXHAUSTED else "task_failed"
    ctx.event(kind, key=key, reason=outcome.reason, killed=outcome.killed,
              elapsed_seconds=outcome.elapsed.total_seconds(),
              warned_after_seconds=(outcome.warned_at - outcome.started_at).total_seconds() if outcome.warned_at else None)
    ctx.count(kind)
    if kind == "task_failed":
        ctx.exceptions += 1
    ctx.publish(key, f"Requeued after {kind.replace('_', ' ')}: {outcome.reason}; worktree discarded.",
                PublishAction.move(TransitionId.TODO, TicketStatus.IN_PROGRESS))


def lane4(ctx: RunContext, deep: bool = False) -> None:
    dep = ctx.dep
    cfg = dep.config.lane(LaneId.LANE4)
    budget = cfg.time_budget(deep)
    entries = read_fix_queue(dep.fix_queue_path)
    ctx.inputs.append(digest_bytes(dep.fix_queue_path.read_bytes()) if dep.fix_queue_path.exists() else digest_bytes(b""))
    start = ctx.now
    lane_end = start + budget.budget
    plan = plan_workers(len(entries), cfg.max_workers, budget.budget, cfg.t_avg)
    ctx.count("workers", plan.workers)
    ctx.count("actionable", len(entries))
    queue = ClaimQueue(entries, key=lambda e: e.ticket_key)
    handled: set[str] = set()
    clock = dep.clock
    events: list = []
    order = 0

    def push(at: datetime, fn: Callable[[], None]) -> None:
        nonlocal order
        heapq.heappush(events, (at, order, fn))
        order += 1

    def next_ticket(worker: str) -> None:
        if ctx.now >= lane_end:
            ctx.event("worker_stopped", worker=worker, reason="lane budget spent")
            return
        entry = queue.pop(worker)
        if entry is None:
            return
        key = entry.ticket_key
        handled.add(key)
        if not _claim(ctx, key, worker):
            push(ctx.now, lambda: next_ticket(worker))
            return
        ws = dep.worktrees.create(key, PlanKind.APPLY)
        task_clock = VirtualClock(ctx.now)
        task = dep.executor.prepare(key, ws, task_clock.now())
        hard_stop = lane_end if deep else None
        outcome = run_with_budget(task, budget, task_clock, hard_stop=hard_stop)

        def finish() -> None:
            _finish(ctx, key, ws, task, outcome)
            next_ticket(worker)

        push(outcome.ended_at, finish)

    for i in range(plan.workers):
        worker = f"{ctx.run_id}/w{i + 1}"
        push(start, lambda w=worker: next_ticket(w))
    while events:
        at, _, fn = heapq.heappop(events)
        clock.advance_to(at)
        fn()
    for worker, key in queue.skipped:
        ctx.count("worker_skips")
        ctx.event("worker_skip", worker=worker, key=key)
    remaining = [e for e in entries if e.ticket_key not in handled]
    write_fix_queue(dep.fix_queue_path, remaining)


# Lane 5: ops intelligence


def lane5(ctx: RunContext) -> None:
    dep = ctx.dep
    cadences = {l: c.cadence for l, c in dep.config.lanes.items()}
    own = f"lane-{LaneId.LANE5.value}"
    locks = [l for l in dep.locks.locks() if l.resource != own]
    result = run_watch(
        dep.tracker, dep.coordinator, locks, dep.reports.last_times(), ctx.now, cadences,
        dep.config.watchdog, dep.config.project, dep.config.drain_batch, dep.digests, dep.window,
        dep.config.skew_tolerance,
    )
    for a in result.alerts:
        ctx.alert(a.line())
        ctx.event("alert", severity=a.severity.name, category=a.category.value, subject=a.subject,
                  age_seconds=a.age.total_seconds())
    if result.drain is not None:
        d = result.drain
        ctx.event("drain", replayed=[[i.partition.value, i.seq, format_ts(i.enqueued_at)] for i in d.replayed],
                  dropped=[[i.partition.value, i.seq, why] for i, why in d.dropped],
                  collisions=[i.payload.args.get("key") for i in d.collisions],
                  remaining=d.remaining, halted=d.halted, status_after=d.status_after.value)
        ctx.count("drained", d.calls)
    if result.digest_path is not None:
        ctx.event("digest", path=result.digest_path.name)
        ctx.outputs.append(digest_bytes(result.digest_path.read_bytes()))


# Lane 6: quality gate


def lane6(ctx: RunContext) -> None:
    dep = ctx.dep
    res = ctx.call(TrackerCall.search("status = InProgress"))
    if not res.executed:
        ctx.event("verification_deferred", reason="tracker unavailable")
        return
    ready = [t for t in res.value if dep.ready_marker(t.key).exists()]
    cfg = dep.config.lane(LaneId.LANE6)
    plan = plan_workers(len(ready), cfg.max_workers, cfg.budget, cfg.t_avg)
    ctx.count("workers", plan.workers)
    queue = ClaimQueue(ready, key=lambda t: t.key)
    workers = [f"{ctx.run_id}/w{i + 1}" for i in range(plan.workers)]
    turn = 0
    while workers:
        worker = workers[turn % len(workers)]
        ticket = queue.pop(worker)
        if ticket is None:
            break
        turn += 1
        _verify_one(ctx, ticket.key)


def _verify_one(ctx: RunContext, key: str) -> None:
    dep = ctx.dep
    marker = json.loads(dep.ready_marker(key).read_text("utf-8"))
    ctx.inputs.append(digest_bytes(dep.ready_marker(key).read_bytes()))
    ws = dep.worktrees.open(marker["workspace"], PlanKind.VERIFY_ONLY)
    if ws is None:
        ctx.alert(f"{key}: worktree missing, routed to review")
        verdict, note = Verdict.NEEDS_HUMAN, "Worktree missing at verification; manual review required."
    else:
        ws.record_pre()
        result = dep.verifier.verify(key, ws)
        for a in result.informational_alerts:
            ctx.alert(f"{key}: {a}")
        try:
            verify_workspace(ws)
            verdict = result.verdict
            note = f"Verification {verdict.value} (run {ctx.run_id})."
        except MutatedStateFailure as exc:
            ctx.event("mutated_state", key=key, workspace=ws.id, pre=exc.pre_digest, post=exc.post_digest)
            ctx.count("mutated_state")
            ctx.alert(f"{key}: FAIL_VERIFY_MUTATED_STATE, routed to manual review")
            verdict = Verdict.NEEDS_HUMAN
            note = f"FAIL_VERIFY_MUTATED_STATE: verify-only plan changed the worktree; manual review required (run {ctx.run_id})."
    tid = route_outcome(verdict)
    outcome = ctx.publish(key, note, PublishAction.move(tid, TicketStatus.IN_PROGRESS, verified=verdict is Verdict.PASS))
    ctx.event("verdict", key=key, verdict=verdict.value, transition=int(tid))
    if outcome.kind in (OutcomeKind.POSTED, OutcomeKind.QUEUED, OutcomeKind.SUPPRESSED):
        dep.ready_marker(key).unlink(missing_ok=True)
        if ws is not None:
            dep.worktrees.discard(ws)
        counter = {
            Verdict.PASS: "end_to_end_resolutions",
            Verdict.FAIL: "regression_catches",
            Verdict.NEEDS_HUMAN: "human_review_escalations",
        }[verdict]
        dep.window.bump(counter, ctx.now)


# Lane 7: spec completeness (content analysis stubbed)


def lane7(ctx: RunContext) -> None:
    dep = ctx.dep
    observations = _read_json(dep.spec_input, [])
    ctx.inputs.append(digest_bytes(json.dumps(observations, sort_keys=True).encode()))
    proposals = [o for o in observations if o.get("status") in ("missing", "stale")]
    ctx.count("proposals", len(proposals))
    for o in proposals:
        ctx.event("proposal", statement=o.get("statement", ""), status=o["status"])
        _note_fallback(ctx, f"Spec {o['status']}: {o.get('statement', '')}", o.get("detail", ""))


LANE_BODIES: dict[LaneId, Callable[[RunContext], None]] = {
    LaneId.LANE1: lane1,
    LaneId.LANE2: lane2,
    LaneId.LANE3: lane3,
    LaneId.LANE4: lane4,
    LaneId.LANE5: lane5,
    LaneId.LANE6: lane6,
    LaneId.LANE7: lane7,
}


def lane_lock_resource(lane: LaneId) -> str:
    return f"lane-{lane.value}"


def run_lane(dep: Deployment, lane: LaneId | str, deep: bool = False) -> RunReport:
    """One end-to-end lane cycle: lock, body, audit stub, evidence, report."""
    lane = LaneId.parse(lane)
    cfg = dep.config.lane(lane)
    started = dep.clock.now()
    run_id = dep.run_id(lane)
    try:
        lock = dep.locks.acquire(lane_lock_resource(lane), run_id, cfg.lock_ttl, started)
    except Contention as exc:
        holder = exc.holder.owner if exc.holder else "unknown"
        report = RunReport(run_id, lane, started, started, None, skipped=True,
                           events=[{"type": "lock_contention", "at": format_ts(started), "holder": holder}])
        dep.history.append(report)
        return report
    ctx = RunContext(dep, lane, run_id, started)
    issued_before = dep.coordinator.issued_total()
    error = None
    try:
        if lane is LaneId.LANE4:
            lane4(ctx, deep)
        else:
            LANE_BODIES[lane](ctx)
        succeeded = True
    except Exception as exc:  # noqa: BLE001 - crash handler: record and preserve evidence
        logger.exception("%s crashed", run_id)
        ctx.exceptions += 1
        succeeded = False
        error = f"{type(exc).__name__}: {exc}"
    queued = dep.coordinator.issued_total() - issued_before
    if queued:
        ctx.alert(f"tracker unreachable: {queued} intent(s) deferred to fallback stores")
    elif dep.coordinator.degraded and lane is not LaneId.LANE5:
        ctx.alert("tracker connectivity DEGRADED; tracker calls skipped")
    if lane in dep.config.audit_lanes and dep.config.audit_rate > 0:
        rng = random.Random(f"{dep.seed}:{run_id}:audit")
        if rng.random() < dep.config.audit_rate:
            ctx.alert(f"dependency audit: {rng.randint(1, 9)} advisories (informational, non-blocking)")
    status = classify_run(succeeded, len(ctx.alerts))
    record = dep.chain.append(run_id, lane, dep.clock.now(), ctx.inputs, ctx.outputs, ctx.exceptions, status)
    report = RunReport(run_id, lane, started, dep.clock.now(), status, ctx.alerts, ctx.events, ctx.counters,
                       error, evidence_seq=record.seq)
    dep.reports.write(report)
    try:
        dep.locks.release(lock)
    except NotHeld:
        logger.warning("%s lost its lane lock before release", run_id)
    dep.history.append(report)
    return report
