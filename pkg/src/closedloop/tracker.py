"""Issue-tracker interface and an in-process simulated tracker with fault injection.

Filter expressions (a deliberately tiny conjunctive language)::

    query   := clause ("AND" clause)*  |  ""
    clause  := "status" "=" STATUS       status equality
             | "labels" "~" LABEL        label containment
             | "key" "^" PREFIX          key prefix

Example: ``status = InProgress AND labels ~ auto-sec``.
"""

from __future__ import annotations

import copy
import json
import random
import re
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable

from .clock import Clock, SystemClock, format_ts, parse_ts
from .fsm import (
    AuthorityTable,
    ContractViolation,
    LaneId,
    TicketStatus,
    TransitionId,
    ticket_step,
)


class TrackerError(Exception):
    retryable = False


class TrackerUnavailable(TrackerError):
    """Tracker unreachable. Callers switch to degraded mode."""


class RateLimited(TrackerError):
    retryable = True


class UnknownKey(TrackerError):
    pass


class EditCannotChangeStatus(TrackerError):
    pass


class QuerySyntaxError(ValueError):
    pass


class RejectReason(Enum):
    STATUS_MISMATCH = "StatusMismatch"
    CONTRACT_VIOLATION = "ContractViolation"


class TransitionRejected(TrackerError):
    def __init__(
        self,
        reason: RejectReason,
        current: TicketStatus,
        violation: ContractViolation | None = None,
    ) -> None:
        detail = f" ({violation})" if violation else ""
        super().__init__(f"{reason.value}: ticket is {current.value}{detail}")
        self.reason = reason
        self.current = current
        self.violation = violation


@dataclass
class CommentRecord:
    body: str
    run_id: str
    timestamp: datetime
    author: str = ""

    def to_json(self) -> dict:
        return {"body": self.body, "run_id": self.run_id, "timestamp": format_ts(self.timestamp), "author": self.author}

    @classmethod
    def from_json(cls, raw: dict) -> CommentRecord:
        return cls(raw["body"], raw.get("run_id", ""), parse_ts(raw["timestamp"]), raw.get("author", ""))


@dataclass
class TransitionLogEntry:
    transition_id: TransitionId
    actor: LaneId
    run_id: str
    timestamp: datetime
    from_status: TicketStatus
    verified: bool = False
    evidence_permalink: str | None = None

    def to_json(self) -> dict:
        return {
            "transition_id": int(self.transition_id),
            "actor": self.actor.value,
            "run_id": self.run_id,
            "timestamp": format_ts(self.timestamp),
            "from_status": self.from_status.value,
            "verified": self.verified,
            "evidence_permalink": self.evidence_permalink,
        }

    @classmethod
    def from_json(cls, raw: dict) -> TransitionLogEntry:
        return cls(
            TransitionId(raw["transition_id"]),
            LaneId.parse(raw["actor"]),
            raw["run_id"],
            parse_ts(raw["timestamp"]),
            TicketStatus(raw["from_status"]),
            raw.get("verified", False),
            raw.get("evidence_permalink"),
        )


@dataclass
class TicketRecord:
    key: str
    summary: str
    description: str = ""
    status: TicketStatus = TicketStatus.TODO
    labels: frozenset[str] = frozenset()
    comments: list[CommentRecord] = field(default_factory=list)
    transition_log: list[TransitionLogEntry] = field(default_factory=list)
    created_at: datetime | None = None

    @property
    def status_since(self) -> datetime | None:
        if self.transition_log:
            return self.transition_log[-1].timestamp
        return self.created_at

    def to_json(self) -> dict:
        return {
            "key": self.key,
            "summary": self.summary,
            "description": self.description,
            "status": self.status.value,
            "labels": sorted(self.labels),
            "comments": [c.to_json() for c in self.comments],
            "transition_log": [t.to_json() for t in self.transition_log],
            "created_at": format_ts(self.created_at) if self.created_at else None,
        }

    @classmethod
    def from_json(cls, raw: dict) -> TicketRecord:
        return cls(
            key=raw["key"],
            summary=raw.get("summary", ""),
            description=raw.get("description", ""),
            status=TicketStatus(raw.get("status", "ToDo")),
            labels=frozenset(raw.get("labels", [])),
            comments=[CommentRecord.from_json(c) for c in raw.get("comments", [])],
            transition_log=[TransitionLogEntry.from_json(t) for t in raw.get("transition_log", [])],
            created_at=parse_ts(raw["created_at"]) if raw.get("created_at") else None,
        )


_CLAUSE = re.compile(r"^\s*(status|labels|key)\s*(=|~|\^)\s*(\S+)\s*$", re.IGNORECASE)


def parse_query(query: str) -> Callable[[TicketRecord], bool]:
    clauses = [c for c in re.split(r"\s+AND\s+", query.strip(), flags=re.IGNORECASE) if c.strip()]
    preds: list[Callable[[TicketRecord], bool]] = []
    for clause in clauses:
        m = _CLAUSE.match(clause)
        if not m:
            raise QuerySyntaxError(f"bad clause: {clause!r}")
        fld, op, value = m.group(1).lower(), m.group(2), m.group(3)
        if fld == "status" and op == "=":
            try:
                want = TicketStatus(value)
            except ValueError:
                raise QuerySyntaxError(f"unknown status {value!r}") from None
            preds.append(lambda t, want=want: t.status is want)
        elif fld == "labels" and op == "~":
            preds.append(lambda t, v=value.lower(): v in t.labels)
        elif fld == "key" and op == "^":
            preds.append(lambda t, v=value: t.key.startswith(v))
        else:
            raise QuerySyntaxError(f"operator {op!r} not supported for {fld}")
    return lambda t: all(p(t) for p in preds)


class Tracker(ABC):
    """The six tracker operations the lanes use."""

    @abstractmethod
    def search(self, query: str) -> list[TicketRecord]: ...

    @abstractmethod
    def get(self, key: str) -> TicketRecord: ...

    @abstractmethod
    def create(self, project: str, summary: str, description: str = "", labels: Iterable[str] = (), run_id: str = "") -> TicketRecord: ...

    @abstractmethod
    def edit(self, key: str, **fields: Any) -> TicketRecord: ...

    @abstractmethod
    def comment(self, key: str, body: str, run_id: str, author: str = "") -> TicketRecord: ...

    @abstractmethod
    def transition(
        self,
        key: str,
        transition: TransitionId,
        actor: LaneId,
        expected_from: TicketStatus,
        run_id: str,
        verified: bool = False,
        evidence_permalink: str | None = None,
    ) -> TicketRecord: ...


@dataclass
class FaultProfile:
    outage_windows: list[tuple[datetime, datetime]] = field(default_factory=list)
    rate_limit_after: int | None = None
    rate_limit_window_seconds: float = 60.0
    latency_mean_ms: float = 0.0
    latency_jitter_ms: float = 0.0
    failure_rate: float = 0.0
    rng_seed: int = 0

    @classmethod
    def from_json(cls, raw: dict) -> FaultProfile:
        latency = raw.get("latency", {})
        return cls(
            outage_windows=[(parse_ts(a), parse_ts(b)) for a, b in raw.get("outage_windows", [])],
            rate_limit_after=raw.get("rate_limit_after"),
            rate_limit_window_seconds=float(raw.get("rate_limit_window_seconds", 60.0)),
            latency_mean_ms=float(latency.get("mean_ms", 0.0)),
            latency_jitter_ms=float(latency.get("jitter_ms", 0.0)),
            failure_rate=float(raw.get("failure_rate", 0.0)),
            rng_seed=int(raw.get("rng_seed", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> FaultProfile:
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))

    def to_json(self) -> dict:
        return {
            "outage_windows": [[format_ts(a), format_ts(b)] for a, b in self.outage_windows],
            "rate_limit_after": self.rate_limit_after,
            "rate_limit_window_seconds": self.rate_limit_window_seconds,
            "latency": {"mean_ms": self.latency_mean_ms, "jitter_ms": self.latency_jitter_ms},
            "failure_rate": self.failure_rate,
            "rng_seed": self.rng_seed,
        }

    def in_outage(self, now: datetime) -> bool:
        return any(start <= now < end for start, end in self.outage_windows)


@dataclass(frozen=True)
class FaultEvent:
    call_no: int
    op: str
    fault: str
    latency_ms: float


WRITE_OPS = frozenset({"create", "edit", "comment", "transition"})


class SimulatedTracker(Tracker):
    """Linearizable in-memory tracker.

    Every operation runs under one re-entrant lock, so status transitions are
    true compare-and-set and concurrent claims serialize.
    """

    def __init__(
        self,
        clock: Clock | None = None,
        faults: FaultProfile | None = None,
        authority: AuthorityTable | None = None,
    ) -> None:
        self.clock = clock or SystemClock()
        self.faults = faults or FaultProfile()
        self.authority = authority
        self._tickets: dict[str, TicketRecord] = {}
        self._next_number: dict[str, int] = {}
        self._mutex = threading.RLock()
        self._rng = random.Random(self.faults.rng_seed)
        self._call_no = 0
        self._window_start: datetime | None = None
        self._window_calls = 0
        self.forced_down = False
        self.fault_trace: list[FaultEvent] = []
        self.call_counts: dict[str, int] = {}

    # fixtures

    def seed(self, tickets: Iterable[TicketRecord | dict]) -> None:
        with self._mutex:
            for t in tickets:
                rec = t if isinstance(t, TicketRecord) else TicketRecord.from_json(t)
                if rec.created_at is None:
                    rec.created_at = self.clock.now()
                self._tickets[rec.key] = copy.deepcopy(rec)
                project, _, num = rec.key.rpartition("-")
                if num.isdigit():
                    self._next_number[project] = max(self._next_number.get(project, 1), int(num) + 1)

    @classmethod
    def from_fixture(cls, path: str | Path, **kwargs: Any) -> SimulatedTracker:
        tracker = cls(**kwargs)
        tracker.seed(json.loads(Path(path).read_text("utf-8")))
        return tracker

    def dump_fixture(self) -> list[dict]:
        with self._mutex:
            return [self._tickets[k].to_json() for k in sorted(self._tickets, key=_key_order)]

    def canonical_state(self) -> list[dict]:
        """Tracker state with timestamps stripped, for parity comparisons."""
        out = []
        for raw in self.dump_fixture():
            raw.pop("created_at", None)
            for c in raw["comments"]:
                c.pop("timestamp")
            for t in raw["transition_log"]:
                t.pop("timestamp")
            out.append(raw)
        return out

    # fault machinery

    def _enter(self, op: str) -> None:
        self._call_no += 1
        self.call_counts[op] = self.call_counts.get(op, 0) + 1
        now = self.clock.now()
        latency = 0.0
        if self.faults.latency_mean_ms or self.faults.latency_jitter_ms:
            latency = max(0.0, self._rng.gauss(self.faults.latency_mean_ms, self.faults.latency_jitter_ms))
        fault = ""
        if self.forced_down or self.faults.in_outage(now):
            fault = "unavailable"
        elif self.faults.failure_rate and self._rng.random() < self.faults.failure_rate:
            fault = "transient"
        elif self.faults.rate_limit_after is not None:
            window = timedelta(seconds=self.faults.rate_limit_window_seconds)
            if self._window_start is None or now - self._window_start >= window:
                self._window_start, self._window_calls = now, 0
            self._window_calls += 1
            if self._window_calls > self.faults.rate_limit_after:
                fault = "rate_limited"
        self.fault_trace.append(FaultEvent(self._call_no, op, fault, latency))
        if fault in ("unavailable", "transient"):
            raise TrackerUnavailable(f"{op}: tracker unreachable")
        if fault == "rate_limited":
            raise RateLimited(f"{op}: rate limit of {self.faults.rate_limit_after} exceeded")

    def _ticket(self, key: str) -> TicketRecord:
        try:
            return self._tickets[key]
        except KeyError:
            raise UnknownKey(key) from None

    # operations

    def search(self, query: str) -> list[TicketRecord]:
        pred = parse_query(query)
        with self._mutex:
            self._enter("search")
            hits = [t for t in self._tickets.values() if pred(t)]
            return [copy.deepcopy(t) for t in sorted(hits, key=lambda t: _key_order(t.key))]

    def get(self, key: str) -> TicketRecord:
        with self._mutex:
            self._enter("get")
            return copy.deepcopy(self._ticket(key))

    def create(self, project: str, summary: str, description: str = "", labels: Iterable[str] = (), run_id: str = "") -> TicketRecord:
        with self._mutex:
            self._enter("create")
            n = self._next_number.get(project, 1)
            self._next_number[project] = n + 1
            rec = TicketRecord(
                key=f"{project}-{n}",
                summary=summary,
                description=description,
                labels=frozenset(l.lower() for l in labels),
                created_at=self.clock.now(),
            )
            self._tickets[rec.key] = rec
            return copy.deepcopy(rec)

    def edit(self, key: str, **fields: Any) -> TicketRecord:
        if "status" in fields:
            raise EditCannotChangeStatus("status changes go through transition()")
        unknown = set(fields) - {"summary", "description", "labels", "add_labels", "remove_labels"}
        if unknown:
            raise ValueError(f"cannot edit {sorted(unknown)}")
        with self._mutex:
            self._enter("edit")
            rec = self._ticket(key)
            if "summary" in fields:
                rec.summary = fields["summary"]
            if "description" in fields:
                rec.description = fields["description"]
            labels = set(rec.labels)
            if "labels" in fields:
                labels = {l.lower() for l in fields["labels"]}
            labels |= {l.lower() for l in fields.get("add_labels", ())}
            labels -= {l.lower() for l in fields.get("remove_labels", ())}
            rec.labels = frozenset(labels)
            return copy.deepcopy(rec)

    def comment(self, key: str, body: str, run_id: str, author: str = "") -> TicketRecord:
        with self._mutex:
            self._enter("comment")
            rec = self._ticket(key)
            rec.comments.append(CommentRecord(body, run_id, self.clock.now(), author))
            return copy.deepcopy(rec)

    def transition(
        self,
        key: str,
        transition: TransitionId,
        actor: LaneId,
        expected_from: TicketStatus,
        run_id: str,
        verified: bool = False,
        evidence_permalink: str | None = None,
    ) -> TicketRecord:
        transition = TransitionId(transition)
        with self._mutex:
            self._enter("transition")
            rec = self._ticket(key)
            if rec.status is not expected_from or rec.status is transition.target:
                raise TransitionRejected(RejectReason.STATUS_MISMATCH, rec.status)
            try:
                new_status = ticket_step(rec.status, transition, actor, verified=verified, authority=self.authority)
            except ContractViolation as exc:
                raise TransitionRejected(RejectReason.CONTRACT_VIOLATION, rec.status, exc) from exc
            rec.transition_log.append(
                TransitionLogEntry(transition, actor, run_id, self.clock.now(), rec.status, verified, evidence_permalink)
            )
            rec.status = new_status
            return copy.deepcopy(rec)

    # helpers for tests and the simulator

    def keys(self) -> list[str]:
        with self._mutex:
            return sorted(self._tickets, key=_key_order)

    def peek(self, key: str) -> TicketRecord:
        """Fault-free read for harness assertions; not one of the six operations."""
        with self._mutex:
            return copy.deepcopy(self._ticket(key))

    def total_calls(self) -> int:
        return self._call_no


def _key_order(key: str) -> tuple:
    project, _, num = key.rpartition("-")
    return (project, int(num)) if num.isdigit() else (key, 0)
