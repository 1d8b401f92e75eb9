"""Lane-5 health monitor: threshold scans, drain triggering and the daily digest."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import datetime, timedelta
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Mapping

from .clock import format_ts, parse_ts
from .config import WatchdogConfig
from .degraded import Connectivity, ConnectivityStatus, ConnectivityStillDown, DegradedCoordinator, DrainReport, TrackerCall
from .fsm import LaneId, TicketStatus
from .locks import Lock, clamped_age
from .tracker import TicketRecord, Tracker, TrackerError

logger = logging.getLogger(__name__)


class Severity(IntEnum):
    INFO = 1
    WARNING = 2
    CRITICAL = 3


class AlertCategory(Enum):
    STALE_IN_PROGRESS = "StaleInProgress"
    AGING_ON_HOLD = "AgingOnHold"
    STALE_LOCK = "StaleLock"
    STALE_REPORT = "StaleReport"
    CONNECTIVITY = "Connectivity"
    DRAIN_STATUS = "DrainStatus"


@dataclass(frozen=True)
class Alert:
    severity: Severity
    category: AlertCategory
    subject: str
    age: timedelta
    emitted_at: datetime
    detail: str = ""

    def to_json(self) -> dict:
        return {
            "severity": self.severity.name,
            "category": self.category.value,
            "subject": self.subject,
            "age_seconds": self.age.total_seconds(),
            "emitted_at": format_ts(self.emitted_at),
            "detail": self.detail,
        }

    def line(self) -> str:
        hours = self.age.total_seconds() / 3600
        tail = f" ({self.detail})" if self.detail else ""
        return f"[{self.severity.name}] {self.category.value} {self.subject}: age {hours:.1f}h{tail}"


def _ticket_alert(t: TicketRecord, now: datetime, cfg: WatchdogConfig) -> Alert | None:
    since = t.status_since
    if since is None:
        return None
    age = now - since
    if t.status is TicketStatus.IN_PROGRESS:
        if age > cfg.in_progress_critical:
            return Alert(Severity.CRITICAL, AlertCategory.STALE_IN_PROGRESS, t.key, age, now, "candidate for requeue")
        if age > cfg.in_progress_warning:
            return Alert(Severity.WARNING, AlertCategory.STALE_IN_PROGRESS, t.key, age, now, "candidate for requeue")
    elif t.status is TicketStatus.ON_HOLD and age > cfg.on_hold_warning:
        return Alert(Severity.WARNING, AlertCategory.AGING_ON_HOLD, t.key, age, now, "escalated to digest")
    return None


def scan(
    tickets: Iterable[TicketRecord],
    locks: Iterable[Lock],
    reports: Mapping[LaneId, datetime | None],
    now: datetime,
    cadences: Mapping[LaneId, timedelta],
    cfg: WatchdogConfig = WatchdogConfig(),
    connectivity: ConnectivityStatus | None = None,
    skew_tolerance: timedelta = timedelta(minutes=5),
) -> list[Alert]:
    """Pure threshold evaluation over consistent snapshots. Thresholds are strict."""
    alerts: list[Alert] = []
    for t in sorted(tickets, key=lambda t: t.key):
        a = _ticket_alert(t, now, cfg)
        if a:
            alerts.append(a)
    for lock in sorted(locks, key=lambda l: l.resource):
        age = clamped_age(lock.acquired_at, now, skew_tolerance)
        if age > lock.ttl:
            alerts.append(Alert(Severity.WARNING, AlertCategory.STALE_LOCK, lock.resource, age, now,
                                f"held by {lock.owner} pid {lock.pid}"))
    for lane in sorted(reports, key=lambda l: l.number):
        last = reports[lane]
        cadence = cadences.get(lane)
        if last is None or cadence is None:
            continue
        age = now - last
        if age > cadence * cfg.report_staleness_factor:
            alerts.append(Alert(Severity.WARNING, AlertCategory.STALE_REPORT, lane.value, age, now))
    if connectivity is not None and connectivity.status is Connectivity.DEGRADED:
        since = connectivity.since or now
        by = connectivity.detected_by.value if connectivity.detected_by else "unknown"
        alerts.append(Alert(Severity.WARNING, AlertCategory.CONNECTIVITY, "tracker", now - since, now,
                            f"DEGRADED, detected by {by}"))
    return alerts


@dataclass
class WatchResult:
    alerts: list[Alert]
    drain: DrainReport | None = None
    digest_path: Path | None = None


class EvaluationWindow:
    """Cumulative counters over a configured evaluation window, persisted as JSON."""

    COUNTERS = ("autonomous_fixes", "regression_catches", "human_review_escalations", "end_to_end_resolutions")

    def __init__(self, path: str | Path, window: Mapping | None = None) -> None:
        self.path = Path(path)
        self.data: dict = {"name": None, "start": None, "end": None, "counters": {c: 0 for c in self.COUNTERS}}
        if self.path.exists():
            self.data = json.loads(self.path.read_text("utf-8"))
        if window:
            self.data.update({k: window.get(k) for k in ("name", "start", "end")})
            for c in self.COUNTERS:
                self.data["counters"].setdefault(c, 0)

    @property
    def configured(self) -> bool:
        return bool(self.data.get("start"))

    def active(self, now: datetime) -> bool:
        if not self.configured:
            return False
        start = parse_ts(self.data["start"])
        end = parse_ts(self.data["end"]) if self.data.get("end") else None
        return start <= now and (end is None or now < end)

    def bump(self, counter: str, now: datetime, n: int = 1) -> None:
        if counter not in self.COUNTERS:
            raise KeyError(counter)
        if self.active(now):
            self.data["counters"][counter] += n
            self.save()

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True), encoding="utf-8")

    def lines(self, now: datetime) -> list[str]:
        if not self.configured:
            return ["- no evaluation window configured"]
        state = "active" if self.active(now) else "inactive"
        out = [f"- window {self.data.get('name') or 'unnamed'} ({state}), {self.data['start']} to {self.data.get('end') or 'open'}"]
        out += [f"- {c}: {self.data['counters'].get(c, 0)}" for c in self.COUNTERS]
        return out


class DigestWriter:
    """At most one digest file per virtual day."""

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)

    def path_for(self, now: datetime) -> Path:
        return self.directory / f"digest-{now.date().isoformat()}.md"

    def emitted(self, now: datetime) -> bool:
        return self.path_for(now).exists()

    def emit(
        self,
        now: datetime,
        alerts: list[Alert],
        window: EvaluationWindow | None = None,
        fallback_notes: str = "",
        status_counts: Mapping[str, int] | None = None,
    ) -> Path | None:
        path = self.path_for(now)
        if path.exists():
            return None
        lines = [f"# Daily digest {now.date().isoformat()}", "", f"Generated {format_ts(now)}.", ""]
        if status_counts is not None:
            lines += ["## Ticket status distribution", ""]
            lines += [f"- {k}: {v}" for k, v in sorted(status_counts.items())] or ["- none"]
            lines.append("")
        for cat in AlertCategory:
            group = [a for a in alerts if a.category is cat]
            lines += [f"## {cat.value}", ""]
            lines += [f"- {a.line()}" for a in group] or ["- none"]
            lines.append("")
        lines += ["## Evaluation window", ""]
        lines += window.lines(now) if window else ["- no evaluation window configured"]
        lines.append("")
        lines += ["## Fallback notes awaiting review", ""]
        count = fallback_notes.count("## Note ")
        lines.append(f"- {count} note(s) pending" if count else "- none")
        lines.append("")
        self.directory.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines), encoding="utf-8")
        return path


def run_watch(
    tracker: Tracker,
    coordinator: DegradedCoordinator,
    locks: Iterable[Lock],
    reports: Mapping[LaneId, datetime | None],
    now: datetime,
    cadences: Mapping[LaneId, timedelta],
    cfg: WatchdogConfig,
    project: str,
    drain_batch: int = 20,
    digest: DigestWriter | None = None,
    window: EvaluationWindow | None = None,
    skew_tolerance: timedelta = timedelta(minutes=5),
) -> WatchResult:
    """One Lane-5 pass. Drains first when DEGRADED, then scans the resulting state."""
    drain: DrainReport | None = None
    extra: list[Alert] = []
    status = coordinator.status()
    if status.status is Connectivity.DEGRADED:
        try:
            drain = coordinator.drain(tracker, drain_batch)
            sev = Severity.INFO if drain.status_after is Connectivity.HEALTHY else Severity.WARNING
            extra.append(Alert(sev, AlertCategory.DRAIN_STATUS, "tracker", timedelta(0), now, drain.summary))
        except ConnectivityStillDown as exc:
            pending = len(coordinator.pending())
            extra.append(Alert(Severity.WARNING, AlertCategory.DRAIN_STATUS, "tracker", timedelta(0), now,
                               f"tracker still down, {pending} intent(s) waiting: {exc}"))
    tickets: list[TicketRecord] = []
    status_counts: dict[str, int] | None = None
    try:
        result = coordinator.call(LaneId.LANE5, TrackerCall.search(f"key ^ {project}-"), tracker)
    except TrackerError as exc:
        logger.warning("ticket scan skipped: %s", exc)
    else:
        if result.executed:
            tickets = result.value
            status_counts = {}
            for t in tickets:
                status_counts[t.status.value] = status_counts.get(t.status.value, 0) + 1
    alerts = scan(tickets, locks, reports, now, cadences, cfg, coordinator.status(), skew_tolerance) + extra
    path = None
    if digest is not None:
        path = digest.emit(now, alerts, window, coordinator.fallback_notes(), status_counts)
    return WatchResult(alerts, drain, path)
