from __future__ import annotations

from datetime import timedelta

import pytest
from hypothesis import given, settings, strategies as st

from closedloop.clock import VirtualClock
from closedloop.degraded import (
    CallKind,
    Connectivity,
    ConnectivityStillDown,
    DegradedCoordinator,
    GuardAction,
    Partition,
    TrackerCall,
)
from closedloop.fsm import LaneId, TicketStatus, TransitionId
from closedloop.locks import Contention, LockManager, MemoryLockStore
from closedloop.tracker import FaultProfile, SimulatedTracker

from .conftest import T0

L1, L2, L4, L5, L6 = LaneId.LANE1, LaneId.LANE2, LaneId.LANE4, LaneId.LANE5, LaneId.LANE6


def setup(tmp_path, n=3, faults=None):
    clock = VirtualClock(T0)
    tracker = SimulatedTracker(clock, faults)
    tracker.seed([{"key": f"KAN-{i}", "summary": f"t{i}"} for i in range(1, n + 1)])
    return clock, tracker, DegradedCoordinator(tmp_path / "deg", clock)


def claim(key):
    return TrackerCall.transition(key, TransitionId.IN_PROGRESS, L4, TicketStatus.TODO, "run")


def test_healthy_proceeds(tmp_path):
    _, tracker, coord = setup(tmp_path)
    res = coord.call(L4, claim("KAN-1"), tracker)
    assert res.decision.action is GuardAction.PROCEED and res.executed
    assert tracker.peek("KAN-1").status is TicketStatus.IN_PROGRESS


def test_first_unavailable_flips_and_queues(tmp_path):
    _, tracker, coord = setup(tmp_path)
    tracker.forced_down = True
    res = coord.call(L4, claim("KAN-1"), tracker)
    assert coord.degraded
    assert coord.status().detected_by is L4
    assert res.decision.action is GuardAction.QUEUED
    assert res.decision.intent.partition is Partition.REPLAY_NEEDED


def test_routing_while_degraded(tmp_path):
    clock, tracker, coord = setup(tmp_path)
    coord.connectivity.mark_degraded(L6, clock.now())
    assert coord.guard_call(L2, TrackerCall.create("KAN", "x")).action is GuardAction.NOTED_ONLY
    assert "## Note 1 | Lane2" in coord.fallback_notes()
    assert coord.guard_call(L1, TrackerCall.create("KAN", "y")).intent.partition is Partition.WRITE_OUTBOX
    assert coord.guard_call(L4, TrackerCall.get("KAN-1")).action is GuardAction.SKIPPED
    assert coord.guard_call(L5, TrackerCall.comment("KAN-1", "x", "r")).action is GuardAction.SKIPPED
    # first observer wins
    assert not coord.connectivity.mark_degraded(L4, clock.now())
    assert coord.status().detected_by is L6


def test_no_tracker_calls_while_degraded(tmp_path):
    clock, tracker, coord = setup(tmp_path)
    coord.connectivity.mark_degraded(L4, clock.now())
    before = tracker.total_calls()
    for lane in LaneId:
        coord.call(lane, TrackerCall.comment("KAN-1", "x", "r"), tracker)
        coord.call(lane, TrackerCall.search("status = ToDo"), tracker)
    assert tracker.total_calls() == before


def _queue_comments(coord, clock, tracker, n):
    tracker.forced_down = True
    for i in range(n):
        coord.call(L6, TrackerCall.comment("KAN-1", f"c{i}", "r"), tracker)
        clock.advance(1)
    tracker.forced_down = False


def test_drain_bounded_to_twenty(tmp_path):
    clock, tracker, coord = setup(tmp_path)
    _queue_comments(coord, clock, tracker, 25)
    rep = coord.drain(tracker)
    assert (len(rep.replayed), rep.remaining, rep.status_after) == (20, 5, Connectivity.DEGRADED)
    assert [c.body for c in tracker.peek("KAN-1").comments] == [f"c{i}" for i in range(20)]
    rep = coord.drain(tracker)
    assert (len(rep.replayed), rep.remaining, rep.status_after) == (5, 0, Connectivity.HEALTHY)
    assert not coord.degraded


def test_full_drain_of_three(tmp_path):
    clock, tracker, coord = setup(tmp_path)
    _queue_comments(coord, clock, tracker, 3)
    rep = coord.drain(tracker)
    assert rep.calls == 3 and coord.pending() == [] and coord.status().status is Connectivity.HEALTHY


def test_drain_while_down_changes_nothing(tmp_path):
    clock, tracker, coord = setup(tmp_path)
    _queue_comments(coord, clock, tracker, 4)
    tracker.forced_down = True
    before = coord.pending()
    with pytest.raises(ConnectivityStillDown):
        coord.drain(tracker)
    assert coord.pending() == before


def test_drain_takes_lane5_lock(tmp_path):
    clock, tracker, coord = setup(tmp_path)
    locks = LockManager(MemoryLockStore(), lambda pid: True)
    locks.acquire("lane-Lane5", "other", timedelta(minutes=30), clock.now(), pid=1)
    with pytest.raises(Contention):
        coord.drain(tracker, locks=locks)


def test_local_claims_and_lost_claim_replay(tmp_path):
    clock, tracker, coord = setup(tmp_path)
    coord.connectivity.mark_degraded(L4, clock.now())
    coord.degraded_claim("KAN-1", "worker-a")
    with pytest.raises(Contention):
        coord.degraded_claim("KAN-1", "worker-b")
    coord.call(L4, claim("KAN-1"), tracker)
    # another agent wins the ticket after recovery, before the drain
    tracker.transition("KAN-1", TransitionId.IN_PROGRESS, L4, TicketStatus.TODO, "other-agent")
    rep = coord.drain(tracker)
    assert len(rep.collisions) == 1 and rep.replayed == []
    entry = coord.drain_log()[-1]
    assert entry["outcome"] == "dropped" and entry["reason"].startswith("collision")
    assert coord.local_locks.claims == {}


def test_intent_roundtrip():
    call = TrackerCall.transition("KAN-1", TransitionId.DONE, L6, TicketStatus.IN_PROGRESS, "r", True, "r/3")
    assert TrackerCall.from_json(call.to_json()) == call
    assert call.kind is CallKind.TRANSITION and call.kind.is_write


def test_merged_queue_oldest_first(tmp_path):
    clock, tracker, coord = setup(tmp_path)
    coord.connectivity.mark_degraded(L4, clock.now())
    coord.call(L6, TrackerCall.comment("KAN-1", "a", "r"), tracker)
    clock.advance(5)
    coord.call(L1, TrackerCall.create("KAN", "new"), tracker)
    clock.advance(5)
    coord.call(L4, TrackerCall.comment("KAN-2", "b", "r"), tracker)
    kinds = [(i.partition, i.payload.args.get("body")) for i in coord.pending()]
    assert kinds == [(Partition.REPLAY_NEEDED, "a"), (Partition.WRITE_OUTBOX, None), (Partition.REPLAY_NEEDED, "b")]


CYCLE = [
    (L4, TransitionId.IN_PROGRESS, TicketStatus.TODO, False),
    (L6, TransitionId.DONE, TicketStatus.IN_PROGRESS, True),
    (L6, TransitionId.TODO, TicketStatus.DONE, False),
]
op = st.one_of(
    st.tuples(st.just("comment"), st.integers(1, 3), st.integers(0, 99)),
    st.tuples(st.just("advance"), st.integers(1, 3), st.just(0)),
    st.tuples(st.just("create"), st.just(0), st.integers(0, 99)),
)


def _play(tmp_path, ops, outage, batch):
    start, length = outage
    faults = FaultProfile(outage_windows=[(T0 + timedelta(minutes=start), T0 + timedelta(minutes=start + length))])
    clock, tracker, coord = setup(tmp_path, faults=faults if length else None)
    phase = {1: 0, 2: 0, 3: 0}
    for kind, ticket, n in ops:
        if kind == "comment":
            coord.call(L6, TrackerCall.comment(f"KAN-{ticket}", f"note {n}", "run"), tracker)
        elif kind == "create":
            coord.call(L1, TrackerCall.create("KAN", f"item {n}"), tracker)
        else:
            lane, tid, frm, verified = CYCLE[phase[ticket] % 3]
            coord.call(lane, TrackerCall.transition(f"KAN-{ticket}", tid, lane, frm, "run", verified), tracker)
            phase[ticket] += 1
        clock.advance(60)
    clock.advance((start + length + 1) * 60)
    drains = []
    while coord.pending() or coord.degraded:
        before = coord.pending()
        rep = coord.drain(tracker, batch)
        assert rep.calls <= batch
        consumed = [i.order_key for i in before[: rep.calls]]
        assert consumed == sorted(consumed)
        drains.append(rep.calls)
    return tracker, coord, drains


@settings(max_examples=40)
@given(st.lists(op, max_size=40), st.tuples(st.integers(0, 40), st.integers(0, 30)), st.integers(1, 20))
def test_parity_after_recovery(tmp_path_factory, ops, outage, batch):
    faulty, coord, _ = _play(tmp_path_factory.mktemp("f"), ops, outage, batch)
    clean, _, _ = _play(tmp_path_factory.mktemp("c"), ops, (0, 0), batch)
    assert faulty.canonical_state() == clean.canonical_state()
    acct = coord.accounting()
    for p in acct.values():
        assert p["issued"] == p["replayed"] + p["dropped"] + p["pending"]
        assert p["pending"] == 0
