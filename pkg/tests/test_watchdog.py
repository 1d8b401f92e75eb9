from __future__ import annotations

from datetime import timedelta

from hypothesis import given, strategies as st

from closedloop.clock import VirtualClock
from closedloop.config import WatchdogConfig
from closedloop.degraded import Connectivity, ConnectivityStatus, DegradedCoordinator, TrackerCall
from closedloop.fsm import LaneId, TicketStatus
from closedloop.locks import Lock
from closedloop.tracker import SimulatedTracker, TicketRecord
from closedloop.watchdog import (
    AlertCategory,
    DigestWriter,
    EvaluationWindow,
    Severity,
    run_watch,
    scan,
)

from .conftest import T0

H = timedelta(hours=1)
CFG = WatchdogConfig()


def ticket(key, status, age):
    return TicketRecord(key=key, summary="s", status=status, created_at=T0 - age)


def alerts_for(tickets, now=T0, **kw):
    return scan(tickets, [], {}, now, {}, CFG, **kw)


def test_in_progress_boundaries():
    assert alerts_for([ticket("A", TicketStatus.IN_PROGRESS, 4 * H)]) == []
    [warn] = alerts_for([ticket("A", TicketStatus.IN_PROGRESS, 4 * H + timedelta(seconds=1))])
    assert warn.severity is Severity.WARNING
    [crit] = alerts_for([ticket("A", TicketStatus.IN_PROGRESS, 11 * H)])
    assert (crit.severity, crit.category) == (Severity.CRITICAL, AlertCategory.STALE_IN_PROGRESS)
    assert alerts_for([ticket("A", TicketStatus.IN_PROGRESS, 10 * H)])[0].severity is Severity.WARNING


def test_on_hold_boundaries():
    [a] = alerts_for([ticket("A", TicketStatus.ON_HOLD, 49 * H)])
    assert (a.severity, a.category) == (Severity.WARNING, AlertCategory.AGING_ON_HOLD)
    assert alerts_for([ticket("A", TicketStatus.ON_HOLD, 48 * H)]) == []
    assert alerts_for([ticket("A", TicketStatus.TODO, 500 * H)]) == []


def test_lock_report_and_connectivity_alerts():
    locks = [Lock("lane-Lane4", "r", 1, T0 - 3 * H, 2 * H), Lock("lane-Lane6", "r", 1, T0 - H, 2 * H)]
    reports = {LaneId.LANE4: T0 - 3 * H, LaneId.LANE6: T0 - H, LaneId.LANE7: None}
    cadences = {LaneId.LANE4: H, LaneId.LANE6: H}
    status = ConnectivityStatus(Connectivity.DEGRADED, T0 - H, LaneId.LANE4)
    out = scan([], locks, reports, T0, cadences, CFG, status)
    assert [(a.category, a.subject) for a in out] == [
        (AlertCategory.STALE_LOCK, "lane-Lane4"),
        (AlertCategory.STALE_REPORT, "Lane4"),
        (AlertCategory.CONNECTIVITY, "tracker"),
    ]


def test_future_lock_timestamp_clamped():
    lock = Lock("r", "o", 1, T0 + timedelta(minutes=30), 2 * H)
    assert scan([], [lock], {}, T0, {}, CFG) == []


statuses = st.sampled_from([TicketStatus.IN_PROGRESS, TicketStatus.ON_HOLD, TicketStatus.TODO])
fleet = st.lists(st.tuples(statuses, st.integers(0, 100 * 60)), max_size=15)


@given(fleet, st.integers(0, 100 * 60))
def test_idempotent_and_monotone(rows, advance_min):
    tickets = [ticket(f"K-{i}", s, timedelta(minutes=m)) for i, (s, m) in enumerate(rows)]
    first = alerts_for(tickets)
    assert first == alerts_for(tickets)
    later = {a.subject: a.severity for a in alerts_for(tickets, now=T0 + timedelta(minutes=advance_min))}
    for a in first:
        assert later[a.subject] >= a.severity
    assert len({a.subject for a in first}) == len(first)


def test_one_digest_per_day(tmp_path):
    writer = DigestWriter(tmp_path)
    alerts = alerts_for([ticket("KAN-1", TicketStatus.IN_PROGRESS, 11 * H)])
    path = writer.emit(T0, alerts, fallback_notes="## Note 1 | Lane2 | x\n")
    assert path is not None
    text = path.read_text()
    assert "StaleInProgress KAN-1" in text and "1 note(s) pending" in text
    assert writer.emit(T0 + 3 * H, alerts) is None
    assert writer.emit(T0 + 24 * H, alerts) is not None
    assert len(list(tmp_path.glob("digest-*.md"))) == 2


def test_evaluation_window(tmp_path):
    win = EvaluationWindow(tmp_path / "w.json", {"name": "pilot", "start": "2026-03-01T00:00:00Z",
                                                  "end": "2026-03-03T00:00:00Z"})
    win.bump("autonomous_fixes", T0)
    win.bump("autonomous_fixes", T0 + 48 * H)
    assert EvaluationWindow(tmp_path / "w.json").data["counters"]["autonomous_fixes"] == 1


def test_run_watch_drains_then_scans(tmp_path):
    clock = VirtualClock(T0)
    tracker = SimulatedTracker(clock)
    tracker.seed([{"key": "KAN-1", "summary": "s", "status": "InProgress", "created_at": "2026-03-01T20:00:00Z"}])
    coord = DegradedCoordinator(tmp_path / "deg", clock)
    tracker.forced_down = True
    coord.call(LaneId.LANE6, TrackerCall.comment("KAN-1", "late", "r"), tracker)
    tracker.forced_down = False
    res = run_watch(tracker, coord, [], {}, clock.now(), {}, CFG, "KAN", digest=DigestWriter(tmp_path / "d"))
    assert res.drain.calls == 1 and not coord.degraded
    cats = {a.category for a in res.alerts}
    assert AlertCategory.STALE_IN_PROGRESS in cats and AlertCategory.DRAIN_STATUS in cats
    assert res.digest_path.exists()
