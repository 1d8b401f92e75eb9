"""Publication pipeline: layered dedup, circuit breaker, transition posting with receipts."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path

from .clock import Clock, format_ts, parse_ts
from .degraded import DegradedCoordinator, GuardAction, TrackerCall
from .fsm import LaneId, TicketStatus, TransitionId
from .locks import Contention, LockManager
from .scheduler import BackoffPolicy, Verdict, retry_call
from .tracker import RejectReason, Tracker, TrackerError, TransitionRejected

logger = logging.getLogger(__name__)

DIGEST_PREFIX = "closedloop-digest: "
BREAKER_THRESHOLD = 3
RECEIPT_LOCK = "receipt-log"


class ActionKind(Enum):
    COMMENT = "Comment"
    TRANSITION = "Transition"


@dataclass(frozen=True)
class PublishAction:
    kind: ActionKind
    transition: TransitionId | None = None
    expected_from: TicketStatus | None = None
    verified: bool = False

    @classmethod
    def comment(cls) -> PublishAction:
        return cls(ActionKind.COMMENT)

    @classmethod
    def move(cls, transition: TransitionId, expected_from: TicketStatus, verified: bool = False) -> PublishAction:
        return cls(ActionKind.TRANSITION, TransitionId(transition), expected_from, verified)


@dataclass(frozen=True)
class PublishItem:
    ticket_key: str
    run_id: str
    body: str
    action: PublishAction = PublishAction(ActionKind.COMMENT)
    evidence_permalink: str = ""

    def payload(self) -> dict:
        return {
            "ticket_key": self.ticket_key,
            "body": self.body,
            "action": self.action.kind.value,
            "transition": int(self.action.transition) if self.action.transition is not None else None,
        }

    @property
    def content_digest(self) -> str:
        raw = json.dumps(self.payload(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(raw).hexdigest()

    def problems(self) -> list[str]:
        out = []
        if not self.ticket_key:
            out.append("ticket_key empty")
        if not self.run_id:
            out.append("run_id empty")
        if not self.body or not self.body.strip():
            out.append("body empty")
        if self.action.kind is ActionKind.TRANSITION and (
            self.action.transition is None or self.action.expected_from is None
        ):
            out.append("transition action needs transition and expected_from")
        return out

    def comment_body(self) -> str:
        return f"{self.body}\n\n{DIGEST_PREFIX}{self.content_digest}"


class BreakerState(Enum):
    CLOSED = "Closed"
    OPEN = "Open"


@dataclass
class CircuitBreaker:
    threshold: int = BREAKER_THRESHOLD
    consecutive_failures: int = 0

    @property
    def state(self) -> BreakerState:
        return BreakerState.OPEN if self.consecutive_failures >= self.threshold else BreakerState.CLOSED

    @property
    def is_open(self) -> bool:
        return self.state is BreakerState.OPEN

    def record_success(self) -> None:
        self.consecutive_failures = 0

    def record_failure(self) -> BreakerState:
        self.consecutive_failures += 1
        return self.state

    def reset(self) -> None:
        self.consecutive_failures = 0


@dataclass(frozen=True)
class Receipt:
    ticket_key: str
    run_id: str
    transition_id: TransitionId | None
    evidence_permalink: str
    posted_at: datetime
    content_digest: str

    def to_json(self) -> dict:
        return {
            "ticket_key": self.ticket_key,
            "run_id": self.run_id,
            "transition_id": int(self.transition_id) if self.transition_id is not None else None,
            "evidence_permalink": self.evidence_permalink,
            "posted_at": format_ts(self.posted_at),
            "content_digest": self.content_digest,
        }

    @classmethod
    def from_json(cls, raw: dict) -> Receipt:
        tid = raw.get("transition_id")
        return cls(
            raw["ticket_key"],
            raw["run_id"],
            TransitionId(tid) if tid is not None else None,
            raw.get("evidence_permalink", ""),
            parse_ts(raw["posted_at"]),
            raw["content_digest"],
        )


class ReceiptLog:
    """Append-only line-delimited receipt log shared by every lane of a deployment."""

    def __init__(
        self,
        path: str | Path,
        clock: Clock,
        locks: LockManager | None = None,
        backoff: BackoffPolicy | None = None,
    ) -> None:
        self.path = Path(path)
        self.clock = clock
        self.locks = locks
        self.backoff = backoff or BackoffPolicy(t0=0.05, t_max=1.0)
        self._mutex = threading.Lock()
        self._offset = 0
        self._index: set[tuple[str, str]] = set()
        self._receipts: list[Receipt] = []
        self.contention_retries = 0

    def _refresh(self) -> None:
        try:
            with self.path.open("rb") as fh:
                fh.seek(self._offset)
                chunk = fh.read()
        except FileNotFoundError:
            return
        # only consume whole lines so a torn tail is retried later
        end = chunk.rfind(b"\n") + 1
        for line in chunk[:end].splitlines():
            if line.strip():
                r = Receipt.from_json(json.loads(line))
                self._index.add((r.ticket_key, r.content_digest))
                self._receipts.append(r)
        self._offset += end

    def contains(self, ticket_key: str, digest: str) -> bool:
        with self._mutex:
            self._refresh()
            return (ticket_key, digest) in self._index

    def receipts(self) -> list[Receipt]:
        with self._mutex:
            self._refresh()
            return list(self._receipts)

    def _on_retry(self, attempt: int, delay: float, exc: BaseException) -> None:
        self.contention_retries += 1
        logger.info("receipt log busy (%s); retry %d in %.2fs", exc, attempt + 1, delay)

    def append(self, receipt: Receipt, owner: str = "publisher") -> None:
        lock = None
        if self.locks is not None:
            lock = retry_call(
                lambda: self.locks.acquire(RECEIPT_LOCK, owner, timedelta(minutes=1), self.clock.now()),
                self.backoff,
                self.clock,
                retry_limit=8,
                retryable=(Contention,),
                on_retry=self._on_retry,
            )
        try:
            with self._mutex:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(receipt.to_json(), sort_keys=True) + "\n")
                self._refresh()
        finally:
            if lock is not None:
                self.locks.release(lock)


class OutcomeKind(Enum):
    POSTED = "Posted"
    SUPPRESSED = "Suppressed"
    SKIPPED = "Skipped"
    FAILED = "Failed"
    QUEUED = "Queued"


class DedupLayer(Enum):
    RUN_CACHE = "RunCache"
    RECEIPT_LOG = "ReceiptLog"
    COMMENT_HISTORY = "CommentHistory"


ALL_LAYERS = frozenset(DedupLayer)


@dataclass(frozen=True)
class PublishOutcome:
    kind: OutcomeKind
    layer: DedupLayer | None = None
    receipt: Receipt | None = None
    reason: str = ""


RunCache = set  # of (ticket_key, run_id, digest)


def route_outcome(verdict: Verdict) -> TransitionId:
    """Verifier verdict to transition. Failures requeue through ToDo, never InProgress."""
    return {
        Verdict.PASS: TransitionId.DONE,
        Verdict.FAIL: TransitionId.TODO,
        Verdict.NEEDS_HUMAN: TransitionId.ON_HOLD,
    }[Verdict(verdict)]


@dataclass
class Publisher:
    tracker: Tracker
    receipts: ReceiptLog
    clock: Clock
    lane: LaneId = LaneId.LANE6
    coordinator: DegradedCoordinator | None = None
    layers: frozenset = ALL_LAYERS
    breaker: CircuitBreaker = field(default_factory=CircuitBreaker)
    run_id: str | None = None
    backoff: BackoffPolicy | None = None

    def begin_run(self, run_id: str) -> None:
        """Breaker scope is one run."""
        self.run_id = run_id
        self.breaker.reset()

    def _call(self, call: TrackerCall):
        def once():
            if self.coordinator is None:
                return GuardAction.PROCEED, call.invoke(self.tracker)
            result = self.coordinator.call(self.lane, call, self.tracker)
            return result.decision.action, result.value

        if self.backoff is None:
            return once()
        return retry_call(once, self.backoff, self.clock)

    def _in_comment_history(self, item: PublishItem) -> bool | None:
        action, rec = self._call(TrackerCall.get(item.ticket_key))
        if action is not GuardAction.PROCEED:
            return None
        line = f"{DIGEST_PREFIX}{item.content_digest}"
        return any(line in c.body.splitlines() for c in rec.comments)

    def _fail(self, reason: str) -> PublishOutcome:
        state = self.breaker.record_failure()
        logger.warning("publish failed (%s); breaker %s", reason, state.value)
        return PublishOutcome(OutcomeKind.FAILED, reason=reason)

    def publish(self, item: PublishItem, run_cache: set | None = None) -> PublishOutcome:
        if self.run_id is not None and item.run_id != self.run_id:
            self.begin_run(item.run_id)
        elif self.run_id is None:
            self.run_id = item.run_id
        problems = item.problems()
        if problems:
            if self.breaker.is_open:
                return PublishOutcome(OutcomeKind.SKIPPED, reason="CircuitOpen")
            return self._fail("malformed: " + "; ".join(problems))
        digest = item.content_digest
        cache_key = (item.ticket_key, item.run_id, digest)
        if DedupLayer.RUN_CACHE in self.layers and run_cache is not None and cache_key in run_cache:
            return PublishOutcome(OutcomeKind.SUPPRESSED, DedupLayer.RUN_CACHE)
        if DedupLayer.RECEIPT_LOG in self.layers and self.receipts.contains(item.ticket_key, digest):
            return PublishOutcome(OutcomeKind.SUPPRESSED, DedupLayer.RECEIPT_LOG)
        if self.breaker.is_open:
            return PublishOutcome(OutcomeKind.SKIPPED, reason="CircuitOpen")
        try:
            if DedupLayer.COMMENT_HISTORY in self.layers and self._in_comment_history(item):
                return PublishOutcome(OutcomeKind.SUPPRESSED, DedupLayer.COMMENT_HISTORY)
            queued = False
            act = item.action
            if act.kind is ActionKind.TRANSITION:
                call = TrackerCall.transition(
                    item.ticket_key, act.transition, self.lane, act.expected_from,
                    item.run_id, act.verified, item.evidence_permalink or None,
                )
                try:
                    action, _ = self._call(call)
                    queued = action is not GuardAction.PROCEED
                except TransitionRejected as exc:
                    already = exc.reason is RejectReason.STATUS_MISMATCH and exc.current is act.transition.target
                    if not already:
                        return self._fail(f"transition rejected: {exc}")
            action, _ = self._call(TrackerCall.comment(item.ticket_key, item.comment_body(), item.run_id, self.lane.value))
            queued = queued or action is not GuardAction.PROCEED
        except TrackerError as exc:
            return self._fail(f"{type(exc).__name__}: {exc}")
        if run_cache is not None:
            run_cache.add(cache_key)
        if queued:
            return PublishOutcome(OutcomeKind.QUEUED, reason="tracker degraded")
        self.breaker.record_success()
        receipt = Receipt(
            item.ticket_key, item.run_id, act.transition, item.evidence_permalink, self.clock.now(), digest
        )
        self.receipts.append(receipt, owner=self.lane.value)
        return PublishOutcome(OutcomeKind.POSTED, receipt=receipt)


__all__ = [
    "ActionKind",
    "BreakerState",
    "CircuitBreaker",
    "DedupLayer",
    "DIGEST_PREFIX",
    "OutcomeKind",
    "PublishAction",
    "PublishItem",
    "PublishOutcome",
    "Publisher",
    "Receipt",
    "ReceiptLog",
    "route_outcome",
]
