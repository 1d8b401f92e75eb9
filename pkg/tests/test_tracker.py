from __future__ import annotations

import threading
from datetime import timedelta

import pytest
from hypothesis import given, settings, strategies as st

from closedloop.fsm import LaneId, TicketStatus, TransitionId, is_legal_path
from closedloop.tracker import (
    EditCannotChangeStatus,
    FaultProfile,
    QuerySyntaxError,
    RateLimited,
    RejectReason,
    SimulatedTracker,
    TrackerUnavailable,
    TransitionRejected,
    UnknownKey,
    parse_query,
)

from .conftest import T0

L4, L6 = LaneId.LANE4, LaneId.LANE6
TODO, INP, DONE = TicketStatus.TODO, TicketStatus.IN_PROGRESS, TicketStatus.DONE


def fixture(n=20, sec=10):
    return [{"key": f"KAN-{i}", "summary": f"t{i}", "labels": ["auto-sec"] if i <= sec else []}
            for i in range(1, n + 1)]


def test_search_empty_and_labels(clock):
    t = SimulatedTracker(clock)
    assert t.search("status = InProgress") == []
    t.seed(fixture())
    hits = t.search("labels ~ auto-sec")
    assert [h.key for h in hits] == [f"KAN-{i}" for i in range(1, 11)]
    assert len(t.search("labels ~ auto-sec AND status = ToDo")) == 10


@pytest.mark.parametrize("q", ["status = Nope", "summary = x", "labels = a"])
def test_bad_queries(q):
    with pytest.raises(QuerySyntaxError):
        parse_query(q)


def test_outage_blocks_reads_and_writes(clock):
    profile = FaultProfile(outage_windows=[(T0, T0 + timedelta(hours=1))])
    t = SimulatedTracker(clock, profile)
    t.seed(fixture(2))
    with pytest.raises(TrackerUnavailable):
        t.search("status = ToDo")
    with pytest.raises(TrackerUnavailable):
        t.comment("KAN-1", "x", "run")
    clock.advance(3600)
    assert len(t.search("status = ToDo")) == 2


def test_cas_transitions(clock):
    t = SimulatedTracker(clock)
    t.seed(fixture(2))
    t.transition("KAN-1", TransitionId.IN_PROGRESS, L4, TODO, "run-1")
    with pytest.raises(TransitionRejected) as exc:
        t.transition("KAN-1", TransitionId.IN_PROGRESS, L4, TODO, "run-2")
    assert exc.value.reason is RejectReason.STATUS_MISMATCH
    rec = t.transition("KAN-1", TransitionId.DONE, L4, INP, "run-3", verified=True, evidence_permalink="run-3/0")
    assert rec.status is DONE
    assert rec.transition_log[-1].run_id == "run-3"
    with pytest.raises(TransitionRejected) as exc:
        t.transition("KAN-1", TransitionId.DONE, L6, DONE, "run-4", verified=True)
    assert exc.value.reason is RejectReason.STATUS_MISMATCH


def test_contract_enforced(clock):
    t = SimulatedTracker(clock)
    t.seed(fixture(1))
    t.transition("KAN-1", TransitionId.IN_PROGRESS, L4, TODO, "r")
    with pytest.raises(TransitionRejected) as exc:
        t.transition("KAN-1", TransitionId.DONE, L6, INP, "r")
    assert exc.value.reason is RejectReason.CONTRACT_VIOLATION


def test_two_concurrent_claims_one_wins(clock):
    t = SimulatedTracker(clock)
    t.seed(fixture(1))
    results = []
    barrier = threading.Barrier(2)

    def claim(run):
        barrier.wait()
        try:
            t.transition("KAN-1", TransitionId.IN_PROGRESS, L4, TODO, run)
            results.append("won")
        except TransitionRejected as exc:
            results.append(exc.reason)

    threads = [threading.Thread(target=claim, args=(f"r{i}",)) for i in range(2)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert sorted(map(str, results)) == sorted(["won", str(RejectReason.STATUS_MISMATCH)])


def test_create_get_roundtrip_and_edit(clock):
    t = SimulatedTracker(clock)
    made = t.create("KAN", "new thing", "desc", ["Src-X"])
    got = t.get(made.key)
    assert got == made and got.status is TODO and "src-x" in got.labels
    with pytest.raises(EditCannotChangeStatus):
        t.edit(made.key, status="Done")
    with pytest.raises(UnknownKey):
        t.get("KAN-999")


def test_rate_limit_window(clock):
    t = SimulatedTracker(clock, FaultProfile(rate_limit_after=2, rate_limit_window_seconds=5))
    t.seed(fixture(1))
    t.get("KAN-1")
    t.get("KAN-1")
    with pytest.raises(RateLimited) as exc:
        t.get("KAN-1")
    assert exc.value.retryable
    clock.advance(5)
    t.get("KAN-1")


def _trace(seed, clock):
    t = SimulatedTracker(clock, FaultProfile(failure_rate=0.3, latency_mean_ms=50, latency_jitter_ms=10, rng_seed=seed))
    t.seed(fixture(3))
    for i in range(60):
        try:
            t.get(f"KAN-{i % 3 + 1}")
        except TrackerUnavailable:
            pass
    return [(e.call_no, e.op, e.fault, e.latency_ms) for e in t.fault_trace]


def test_fault_trace_reproducible(clock):
    assert _trace(7, clock) == _trace(7, clock)
    assert _trace(7, clock) != _trace(8, clock)


def test_fixture_roundtrip(clock):
    t = SimulatedTracker(clock)
    t.seed(fixture(3))
    t.transition("KAN-2", TransitionId.IN_PROGRESS, L4, TODO, "r")
    t.comment("KAN-2", "hello", "r", "Lane4")
    again = SimulatedTracker(clock)
    again.seed(t.dump_fixture())
    assert again.dump_fixture() == t.dump_fixture()


ACTORS = [LaneId.LANE3, LaneId.LANE4, LaneId.LANE6]
ops = st.lists(st.tuples(st.sampled_from(list(TransitionId)), st.sampled_from(ACTORS),
                         st.sampled_from(list(TicketStatus)), st.booleans()), min_size=1, max_size=12)


@settings(max_examples=60)
@given(ops)
def test_concurrent_transitions_leave_legal_logs(batch):
    from closedloop.clock import VirtualClock

    t = SimulatedTracker(VirtualClock(T0))
    t.seed(fixture(1))
    barrier = threading.Barrier(len(batch))

    def go(op):
        tid, actor, expected, verified = op
        barrier.wait()
        try:
            t.transition("KAN-1", tid, actor, expected, "r", verified=verified)
        except TransitionRejected:
            pass

    threads = [threading.Thread(target=go, args=(op,)) for op in batch]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    log = t.peek("KAN-1").transition_log
    assert is_legal_path([(e.transition_id, e.actor, e.verified) for e in log])
    # the log is a chain: each entry starts where the previous one ended
    status = TODO
    for e in log:
        assert e.from_status is status
        status = e.transition_id.target
    assert status is t.peek("KAN-1").status
