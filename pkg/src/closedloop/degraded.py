"""Degraded-mode coordination: connectivity state, partitioned fallback queues, drain."""

from __future__ import annotations

import fcntl
import json
import logging
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Any, Iterator

from .clock import Clock, format_ts, parse_ts
from .fsm import LaneId, TicketStatus, TransitionId
from .locks import Contention, LocalTicketLocks, LockManager
from .tracker import (
    RejectReason,
    Tracker,
    TrackerError,
    TrackerUnavailable,
    TransitionRejected,
)

logger = logging.getLogger(__name__)

DEFAULT_DRAIN_BATCH = 20
DRAIN_LOCK = "lane-Lane5"


class Connectivity(Enum):
    HEALTHY = "HEALTHY"
    DEGRADED = "DEGRADED"


@dataclass(frozen=True)
class ConnectivityStatus:
    status: Connectivity
    since: datetime | None = None
    detected_by: LaneId | None = None

    def to_json(self) -> dict:
        return {
            "status": self.status.value,
            "since": format_ts(self.since) if self.since else None,
            "detected_by": self.detected_by.value if self.detected_by else None,
        }

    @classmethod
    def from_json(cls, raw: dict) -> ConnectivityStatus:
        return cls(
            Connectivity(raw["status"]),
            parse_ts(raw["since"]) if raw.get("since") else None,
            LaneId.parse(raw["detected_by"]) if raw.get("detected_by") else None,
        )


@contextmanager
def _flock(path: Path) -> Iterator[None]:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_CREAT | os.O_RDWR, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        yield
    finally:
        os.close(fd)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class ConnectivityDocument:
    """The single deployment-wide connectivity status file."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._guard = self.path.with_suffix(".guard")
        self._mutex = threading.Lock()

    def read(self) -> ConnectivityStatus:
        try:
            return ConnectivityStatus.from_json(json.loads(self.path.read_text("utf-8")))
        except FileNotFoundError:
            return ConnectivityStatus(Connectivity.HEALTHY)

    def mark_degraded(self, lane: LaneId, now: datetime) -> bool:
        """First observer wins; returns True if this call flipped the status."""
        with self._mutex, _flock(self._guard):
            if self.read().status is Connectivity.DEGRADED:
                return False
            _atomic_write(self.path, json.dumps(ConnectivityStatus(Connectivity.DEGRADED, now, lane).to_json()))
            logger.warning("connectivity DEGRADED (detected by %s)", lane.value)
            return True

    def mark_healthy(self, now: datetime, lane: LaneId = LaneId.LANE5) -> None:
        with self._mutex, _flock(self._guard):
            _atomic_write(self.path, json.dumps(ConnectivityStatus(Connectivity.HEALTHY, now, lane).to_json()))


class CallKind(Enum):
    SEARCH = "Search"
    GET = "Get"
    CREATE = "Create"
    EDIT = "Edit"
    COMMENT = "Comment"
    TRANSITION = "Transition"

    @property
    def is_write(self) -> bool:
        return self in (CallKind.CREATE, CallKind.EDIT, CallKind.COMMENT, CallKind.TRANSITION)


@dataclass(frozen=True)
class TrackerCall:
    """A serializable tracker invocation."""

    kind: CallKind
    args: dict[str, Any]

    @classmethod
    def search(cls, query: str) -> TrackerCall:
        return cls(CallKind.SEARCH, {"query": query})

    @classmethod
    def get(cls, key: str) -> TrackerCall:
        return cls(CallKind.GET, {"key": key})

    @classmethod
    def create(cls, project: str, summary: str, description: str = "", labels=(), run_id: str = "") -> TrackerCall:
        return cls(CallKind.CREATE, {"project": project, "summary": summary, "description": description,
                                     "labels": sorted(labels), "run_id": run_id})

    @classmethod
    def edit(cls, key: str, **fields: Any) -> TrackerCall:
        fields = {k: sorted(v) if k.endswith("labels") else v for k, v in fields.items()}
        return cls(CallKind.EDIT, {"key": key, "fields": fields})

    @classmethod
    def comment(cls, key: str, body: str, run_id: str, author: str = "") -> TrackerCall:
        return cls(CallKind.COMMENT, {"key": key, "body": body, "run_id": run_id, "author": author})

    @classmethod
    def transition(
        cls,
        key: str,
        transition: TransitionId,
        actor: LaneId,
        expected_from: TicketStatus,
        run_id: str,
        verified: bool = False,
        evidence_permalink: str | None = None,
    ) -> TrackerCall:
        return cls(CallKind.TRANSITION, {
            "key": key, "transition": int(transition), "actor": actor.value,
            "expected_from": expected_from.value, "run_id": run_id,
            "verified": verified, "evidence_permalink": evidence_permalink,
        })

    def invoke(self, tracker: Tracker) -> Any:
        a = self.args
        if self.kind is CallKind.SEARCH:
            return tracker.search(a["query"])
        if self.kind is CallKind.GET:
            return tracker.get(a["key"])
        if self.kind is CallKind.CREATE:
            return tracker.create(a["project"], a["summary"], a.get("description", ""), a.get("labels", ()), a.get("run_id", ""))
        if self.kind is CallKind.EDIT:
            return tracker.edit(a["key"], **a["fields"])
        if self.kind is CallKind.COMMENT:
            return tracker.comment(a["key"], a["body"], a["run_id"], a.get("author", ""))
        return tracker.transition(
            a["key"], TransitionId(a["transition"]), LaneId.parse(a["actor"]),
            TicketStatus(a["expected_from"]), a["run_id"], a.get("verified", False), a.get("evidence_permalink"),
        )

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "args": self.args}

    @classmethod
    def from_json(cls, raw: dict) -> TrackerCall:
        return cls(CallKind(raw["kind"]), raw["args"])


class Partition(Enum):
    REPLAY_NEEDED = "ReplayNeeded"
    FALLBACK_NOTES = "FallbackNotes"
    WRITE_OUTBOX = "WriteOutbox"

    @property
    def filename(self) -> str:
        return {
            Partition.REPLAY_NEEDED: "replay_needed.jsonl",
            Partition.FALLBACK_NOTES: "fallback_notes.md",
            Partition.WRITE_OUTBOX: "write_outbox.jsonl",
        }[self]


LANE_PARTITION: dict[LaneId, Partition] = {
    LaneId.LANE1: Partition.WRITE_OUTBOX,
    LaneId.LANE2: Partition.FALLBACK_NOTES,
    LaneId.LANE3: Partition.REPLAY_NEEDED,
    LaneId.LANE4: Partition.REPLAY_NEEDED,
    LaneId.LANE6: Partition.REPLAY_NEEDED,
    LaneId.LANE7: Partition.FALLBACK_NOTES,
}
REPLAYABLE = (Partition.REPLAY_NEEDED, Partition.WRITE_OUTBOX)


@dataclass(frozen=True)
class QueuedIntent:
    seq: int
    lane: LaneId
    kind: CallKind
    payload: TrackerCall
    enqueued_at: datetime
    partition: Partition

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "lane": self.lane.value,
            "kind": self.kind.value,
            "payload": self.payload.to_json(),
            "enqueued_at": format_ts(self.enqueued_at),
            "partition": self.partition.value,
        }

    @classmethod
    def from_json(cls, raw: dict) -> QueuedIntent:
        return cls(
            int(raw["seq"]),
            LaneId.parse(raw["lane"]),
            CallKind(raw["kind"]),
            TrackerCall.from_json(raw["payload"]),
            parse_ts(raw["enqueued_at"]),
            Partition(raw["partition"]),
        )

    @property
    def order_key(self) -> tuple:
        return (self.enqueued_at, self.seq, self.partition.value)


class IntentQueue:
    """One partition on disk. Appends and removals are atomic per partition."""

    def __init__(self, root: Path, partition: Partition) -> None:
        self.partition = partition
        self.path = root / partition.filename
        self._seq_path = root / f".{partition.filename}.seq"
        self._guard = root / f".{partition.filename}.guard"
        self._mutex = threading.Lock()

    def _next_seq(self) -> int:
        try:
            n = int(self._seq_path.read_text("utf-8").strip() or 0)
        except FileNotFoundError:
            n = 0
        _atomic_write(self._seq_path, str(n + 1))
        return n + 1

    def issued(self) -> int:
        try:
            return int(self._seq_path.read_text("utf-8").strip() or 0)
        except FileNotFoundError:
            return 0

    def append(self, lane: LaneId, call: TrackerCall, now: datetime) -> QueuedIntent:
        with self._mutex, _flock(self._guard):
            intent = QueuedIntent(self._next_seq(), lane, call.kind, call, now, self.partition)
            with self.path.open("a", encoding="utf-8") as fh:
                if self.partition is Partition.FALLBACK_NOTES:
                    fh.write(_note_block(intent))
                else:
                    fh.write(json.dumps(intent.to_json(), sort_keys=True) + "\n")
            return intent

    def list(self) -> list[QueuedIntent]:
        if self.partition is Partition.FALLBACK_NOTES:
            raise TypeError("fallback notes are not replayable intents")
        try:
            text = self.path.read_text("utf-8")
        except FileNotFoundError:
            return []
        return [QueuedIntent.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]

    def remove(self, seqs: set[int]) -> None:
        if not seqs:
            return
        with self._mutex, _flock(self._guard):
            keep = [i for i in self.list() if i.seq not in seqs]
            _atomic_write(self.path, "".join(json.dumps(i.to_json(), sort_keys=True) + "\n" for i in keep))

    def read_text(self) -> str:
        try:
            return self.path.read_text("utf-8")
        except FileNotFoundError:
            return ""


def _note_block(intent: QueuedIntent) -> str:
    payload = json.dumps(intent.payload.to_json(), sort_keys=True)
    return (
        f"## Note {intent.seq} | {intent.lane.value} | {format_ts(intent.enqueued_at)}\n\n"
        f"- intended action: {intent.kind.value}\n"
        f"- payload: `{payload}`\n"
        "- status: informational, needs operator review\n\n"
    )


class GuardAction(Enum):
    PROCEED = "Proceed"
    QUEUED = "Queued"
    NOTED_ONLY = "NotedOnly"
    SKIPPED = "Skipped"


@dataclass(frozen=True)
class GuardDecision:
    action: GuardAction
    intent: QueuedIntent | None = None
    reason: str = ""


@dataclass
class CallResult:
    decision: GuardDecision
    value: Any = None

    @property
    def executed(self) -> bool:
        return self.decision.action is GuardAction.PROCEED


class ConnectivityStillDown(TrackerError):
    pass


@dataclass
class DrainReport:
    replayed: list[QueuedIntent] = field(default_factory=list)
    dropped: list[tuple[QueuedIntent, str]] = field(default_factory=list)
    collisions: list[QueuedIntent] = field(default_factory=list)
    remaining: int = 0
    halted: str | None = None
    status_after: Connectivity = Connectivity.DEGRADED
    summary: str = ""

    @property
    def calls(self) -> int:
        return len(self.replayed) + len(self.dropped)


class DegradedCoordinator:
    """Connectivity gate in front of every tracker call plus the recovery drain."""

    def __init__(
        self,
        state_dir: str | Path,
        clock: Clock,
        sentinel_key: str | None = None,
    ) -> None:
        self.root = Path(state_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self.sentinel_key = sentinel_key
        self.connectivity = ConnectivityDocument(self.root / "connectivity.json")
        self.queues = {p: IntentQueue(self.root, p) for p in Partition}
        self.local_locks = LocalTicketLocks(self.root / ".ticket_locks.json")
        self._drain_log = self.root / "drain_log.jsonl"

    def status(self) -> ConnectivityStatus:
        return self.connectivity.read()

    @property
    def degraded(self) -> bool:
        return self.status().status is Connectivity.DEGRADED

    def guard_call(self, lane: LaneId, call: TrackerCall) -> GuardDecision:
        if not self.degraded:
            return GuardDecision(GuardAction.PROCEED)
        if not call.kind.is_write:
            return GuardDecision(GuardAction.SKIPPED, reason="reads skipped while degraded")
        partition = LANE_PARTITION.get(lane)
        if partition is None:
            return GuardDecision(GuardAction.SKIPPED, reason=f"{lane.value} has no fallback store")
        intent = self.queues[partition].append(lane, call, self.clock.now())
        if partition is Partition.FALLBACK_NOTES:
            return GuardDecision(GuardAction.NOTED_ONLY, intent)
        return GuardDecision(GuardAction.QUEUED, intent)

    def call(self, lane: LaneId, call: TrackerCall, tracker: Tracker) -> CallResult:
        """Guarded invocation. A tracker outage flips to DEGRADED and queues the call."""
        decision = self.guard_call(lane, call)
        if decision.action is not GuardAction.PROCEED:
            return CallResult(decision)
        try:
            return CallResult(decision, call.invoke(tracker))
        except TrackerUnavailable:
            self.connectivity.mark_degraded(lane, self.clock.now())
            return CallResult(self.guard_call(lane, call))

    def degraded_claim(self, key: str, owner: str) -> None:
        """Offline collision protection. Raises :class:`Contention` if already claimed."""
        self.local_locks.claim(key, owner, self.clock.now())

    def pending(self) -> list[QueuedIntent]:
        intents = [i for p in REPLAYABLE for i in self.queues[p].list()]
        return sorted(intents, key=lambda i: i.order_key)

    def fallback_notes(self) -> str:
        return self.queues[Partition.FALLBACK_NOTES].read_text()

    def _log(self, intent: QueuedIntent, outcome: str, reason: str = "") -> None:
        with self._drain_log.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({
                "at": format_ts(self.clock.now()), "partition": intent.partition.value,
                "seq": intent.seq, "outcome": outcome, "reason": reason,
                "enqueued_at": format_ts(intent.enqueued_at),
            }, sort_keys=True) + "\n")

    def drain_log(self) -> list[dict]:
        try:
            return [json.loads(l) for l in self._drain_log.read_text("utf-8").splitlines() if l.strip()]
        except FileNotFoundError:
            return []

    def issued_total(self) -> int:
        return sum(q.issued() for q in self.queues.values())

    def accounting(self) -> dict[str, dict[str, int]]:
        """Per replayable partition: issued, replayed, dropped and pending intent counts."""
        log = self.drain_log()
        out = {}
        for p in REPLAYABLE:
            entries = [e for e in log if e["partition"] == p.value]
            out[p.value] = {
                "issued": self.queues[p].issued(),
                "replayed": sum(1 for e in entries if e["outcome"] == "replayed"),
                "dropped": sum(1 for e in entries if e["outcome"] == "dropped"),
                "pending": len(self.queues[p].list()),
            }
        return out

    def probe(self, tracker: Tracker) -> None:
        try:
            if self.sentinel_key:
                tracker.get(self.sentinel_key)
            else:
                tracker.search("key ^ __probe__")
        except TrackerError as exc:
            raise ConnectivityStillDown(str(exc)) from exc

    def drain(
        self,
        tracker: Tracker,
        max_calls: int = DEFAULT_DRAIN_BATCH,
        locks: LockManager | None = None,
        owner: str = "drain",
    ) -> DrainReport:
        """Replay up to ``max_calls`` queued writes oldest-first; halt on the first outage.

        Pass ``locks`` when the caller does not already hold the Lane-5 lock.
        """
        lock = None
        if locks is not None:
            lock = locks.acquire(DRAIN_LOCK, owner, timedelta(minutes=30), self.clock.now())
        try:
            return self._drain(tracker, max_calls)
        finally:
            if lock is not None:
                locks.release(lock)

    def _drain(self, tracker: Tracker, max_calls: int) -> DrainReport:
        self.probe(tracker)
        report = DrainReport()
        consumed: dict[Partition, set[int]] = {p: set() for p in REPLAYABLE}
        for intent in self.pending()[:max_calls]:
            try:
                intent.payload.invoke(tracker)
            except TrackerError as exc:
                if isinstance(exc, TransitionRejected):
                    reason = f"rejected: {exc}"
                    if (
                        exc.reason is RejectReason.STATUS_MISMATCH
                        and intent.payload.args.get("transition") == int(TransitionId.IN_PROGRESS)
                    ):
                        reason = f"collision: {exc}"
                        report.collisions.append(intent)
                        self.local_locks.release(intent.payload.args["key"])
                        logger.warning("drain dropped lost claim on %s", intent.payload.args["key"])
                    report.dropped.append((intent, reason))
                    self._log(intent, "dropped", reason)
                    consumed[intent.partition].add(intent.seq)
                elif exc.retryable or isinstance(exc, TrackerUnavailable):
                    report.halted = f"{type(exc).__name__}: {exc}"
                    break
                else:
                    report.dropped.append((intent, f"error: {exc}"))
                    self._log(intent, "dropped", str(exc))
                    consumed[intent.partition].add(intent.seq)
                continue
            report.replayed.append(intent)
            self._log(intent, "replayed")
            consumed[intent.partition].add(intent.seq)
        for partition, seqs in consumed.items():
            self.queues[partition].remove(seqs)
        report.remaining = len(self.pending())
        if report.remaining == 0 and report.halted is None:
            if self.degraded:
                self.connectivity.mark_healthy(self.clock.now())
            self.local_locks.clear()
            report.status_after = Connectivity.HEALTHY
        else:
            report.status_after = self.status().status
        report.summary = (
            f"recovery drain: {len(report.replayed)} replayed, {len(report.dropped)} dropped "
            f"({len(report.collisions)} collisions), {report.remaining} remaining, "
            f"status {report.status_after.value}"
            + (f", halted by {report.halted}" if report.halted else "")
        )
        logger.info(report.summary)
        return report


__all__ = [
    "CallKind",
    "CallResult",
    "Connectivity",
    "ConnectivityDocument",
    "ConnectivityStatus",
    "ConnectivityStillDown",
    "Contention",
    "DegradedCoordinator",
    "DrainReport",
    "GuardAction",
    "GuardDecision",
    "IntentQueue",
    "LANE_PARTITION",
    "Partition",
    "QueuedIntent",
    "TrackerCall",
]
