"""End-to-end lane cycles against the simulated tracker."""

from __future__ import annotations

from datetime import timedelta

import pytest

from closedloop.clock import VirtualClock
from closedloop.config import load_config
from closedloop.deployment import Deployment
from closedloop.evidence import TerminalStatus
from closedloop.fsm import LaneId
from closedloop.lanes import lane_lock_resource, run_lane
from closedloop.matcher import FixQueueEntry, write_fix_queue
from closedloop.tracker import SimulatedTracker

from .conftest import T0


def _tickets(n: int) -> list[dict]:
    return [{"key": f"KAN-{i}", "summary": f"Ticket {i}", "status": "ToDo"} for i in range(1, n + 1)]


def _deployment(tmp_path, n: int = 3, overrides: dict | None = None) -> Deployment:
    clock = VirtualClock(T0)
    tracker = SimulatedTracker(clock)
    tracker.seed(_tickets(n))
    return Deployment(tmp_path / "state", load_config(overrides=overrides or {}), clock, tracker, seed=7)


def _queue(dep: Deployment, keys: list[str]) -> None:
    write_fix_queue(dep.fix_queue_path, [
        FixQueueEntry(k, 100.0 - i, "auto_sec", [], "core", 1.0) for i, k in enumerate(keys)
    ])


def _transitions(dep: Deployment, key: str) -> list[int]:
    return [int(e.transition_id) for e in dep.tracker.peek(key).transition_log]


def test_lane4_empty_fix_queue_is_clean(tmp_path):
    dep = _deployment(tmp_path)
    _queue(dep, [])
    report = run_lane(dep, LaneId.LANE4)
    assert report.terminal_status is TerminalStatus.CLEAN
    assert report.exit_code == 0
    assert report.counters.get("workers", 0) == 0
    assert all(not dep.tracker.peek(f"KAN-{i}").transition_log for i in range(1, 4))
    assert dep.chain.validate().valid


def test_lane4_missing_fix_queue_is_clean(tmp_path):
    dep = _deployment(tmp_path)
    report = run_lane(dep, LaneId.LANE4)
    assert report.terminal_status is TerminalStatus.CLEAN


def test_lane4_then_lane6_pass_closes_ticket(tmp_path):
    dep = _deployment(tmp_path)
    _queue(dep, ["KAN-1"])
    r4 = run_lane(dep, LaneId.LANE4)
    assert r4.terminal_status is TerminalStatus.CLEAN
    assert dep.ready_marker("KAN-1").exists()
    dep.clock.advance(3600)
    r6 = run_lane(dep, LaneId.LANE6)
    assert r6.terminal_status is TerminalStatus.CLEAN
    assert _transitions(dep, "KAN-1") == [21, 41]
    assert not dep.ready_marker("KAN-1").exists()


def test_lane6_failing_verification_requeues_via_todo(tmp_path):
    dep = _deployment(tmp_path, overrides={"verifier": {"tickets": {"KAN-1": {"verdict": "Fail"}}}})
    _queue(dep, ["KAN-1"])
    run_lane(dep, LaneId.LANE4)
    dep.clock.advance(3600)
    run_lane(dep, LaneId.LANE6)
    assert _transitions(dep, "KAN-1") == [21, 11]
    assert dep.tracker.peek("KAN-1").status.value == "ToDo"


def test_lane4_outage_mid_cycle_is_degraded_not_failed(tmp_path):
    dep = _deployment(tmp_path, n=4)
    _queue(dep, ["KAN-1", "KAN-2", "KAN-3", "KAN-4"])
    dep.tracker.forced_down = True
    report = run_lane(dep, LaneId.LANE4)
    assert report.exit_code == 0
    assert report.terminal_status is TerminalStatus.DEGRADED
    assert dep.coordinator.degraded
    assert len(dep.coordinator.pending()) > 0
    assert any("intent" in a for a in report.alerts)


def test_lane6_outage_defers_verification(tmp_path):
    dep = _deployment(tmp_path)
    _queue(dep, ["KAN-1"])
    run_lane(dep, LaneId.LANE4)
    dep.tracker.forced_down = True
    r6 = run_lane(dep, LaneId.LANE6)
    assert r6.exit_code == 0
    assert r6.events_of("verification_deferred")
    assert dep.ready_marker("KAN-1").exists()


def test_oversized_diff_goes_to_human_review(tmp_path):
    dep = _deployment(tmp_path, overrides={"executor": {"tickets": {"KAN-1": {"diff_lines": 250}}}})
    _queue(dep, ["KAN-1"])
    run_lane(dep, LaneId.LANE4)
    assert _transitions(dep, "KAN-1") == [21, 31]
    assert not dep.ready_marker("KAN-1").exists()


def test_failing_task_requeues(tmp_path):
    dep = _deployment(tmp_path, overrides={"executor": {"tickets": {"KAN-1": {"fails": True}}}})
    _queue(dep, ["KAN-1"])
    report = run_lane(dep, LaneId.LANE4)
    assert _transitions(dep, "KAN-1") == [21, 11]
    assert report.counters.get("task_failed") == 1


def test_lane_lock_held_skips_run(tmp_path):
    dep = _deployment(tmp_path)
    import os

    dep.locks.acquire(lane_lock_resource(LaneId.LANE4), "someone-else", timedelta(minutes=30), dep.clock.now(),
                      pid=os.getpid())
    report = run_lane(dep, LaneId.LANE4)
    assert report.skipped
    assert report.terminal_status is None
    assert report.exit_code == 0
    assert len(dep.chain) == 0


def test_crash_is_recorded_failed(tmp_path, monkeypatch):
    from closedloop import lanes

    def boom(ctx):
        raise RuntimeError("simulated crash")

    monkeypatch.setitem(lanes.LANE_BODIES, LaneId.LANE7, boom)
    dep = _deployment(tmp_path)
    report = run_lane(dep, LaneId.LANE7)
    assert report.terminal_status is TerminalStatus.FAILED
    assert report.exit_code == 1
    assert "simulated crash" in report.error
    rec = dep.chain.records()[-1]
    assert rec.terminal_status is TerminalStatus.FAILED
    # the lane lock is released even after a crash
    assert run_lane(dep, LaneId.LANE7).skipped is False


def test_lane2_audit_leaves_repo_untouched(tmp_path):
    dep = _deployment(tmp_path)
    dep.audit_input.write_text('[{"id": "F-1", "title": "Missing CSRF token"}]', encoding="utf-8")
    report = run_lane(dep, LaneId.LANE2)
    assert report.terminal_status is TerminalStatus.CLEAN
    assert report.counters["new_findings"] == 1
    assert dep.findings_path.exists()


@pytest.mark.parametrize("lane", list(LaneId))
def test_every_lane_runs_clean_on_empty_state(tmp_path, lane):
    dep = _deployment(tmp_path)
    report = run_lane(dep, lane)
    assert report.exit_code == 0
    assert dep.chain.validate().valid
