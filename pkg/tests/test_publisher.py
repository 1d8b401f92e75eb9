from __future__ import annotations

from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from closedloop.clock import VirtualClock
from closedloop.degraded import DegradedCoordinator
from closedloop.fsm import LaneId, TicketStatus, TransitionId
from closedloop.locks import LockManager, MemoryLockStore
from closedloop.publisher import (
    DIGEST_PREFIX,
    ActionKind,
    BreakerState,
    CircuitBreaker,
    DedupLayer,
    OutcomeKind,
    PublishAction,
    PublishItem,
    Publisher,
    ReceiptLog,
    route_outcome,
)
from closedloop.scheduler import Verdict
from closedloop.tracker import SimulatedTracker

from .conftest import T0


def make(tmp_path, n=5, coordinator=False):
    clock = VirtualClock(T0)
    tracker = SimulatedTracker(clock)
    tracker.seed([{"key": f"KAN-{i}", "summary": "t"} for i in range(1, n + 1)])
    log = ReceiptLog(tmp_path / "receipts.jsonl", clock, LockManager(MemoryLockStore(), lambda p: True))
    coord = DegradedCoordinator(tmp_path / "deg", clock) if coordinator else None
    pub = Publisher(tracker, log, clock, LaneId.LANE6, coordinator=coord)
    return tracker, log, pub


def posted_digests(tracker):
    out = []
    for key in tracker.keys():
        for c in tracker.peek(key).comments:
            out += [l[len(DIGEST_PREFIX):] for l in c.body.splitlines() if l.startswith(DIGEST_PREFIX)]
    return out


def test_run_cache_layer(tmp_path):
    tracker, _, pub = make(tmp_path)
    cache: set = set()
    item = PublishItem("KAN-1", "run-1", "body")
    assert pub.publish(item, cache).kind is OutcomeKind.POSTED
    out = pub.publish(item, cache)
    assert (out.kind, out.layer) == (OutcomeKind.SUPPRESSED, DedupLayer.RUN_CACHE)


def test_receipt_log_layer_spans_runs(tmp_path):
    _, _, pub = make(tmp_path)
    pub.publish(PublishItem("KAN-1", "run-1", "body"), set())
    out = pub.publish(PublishItem("KAN-1", "run-2", "body"), set())
    assert (out.kind, out.layer) == (OutcomeKind.SUPPRESSED, DedupLayer.RECEIPT_LOG)


def test_comment_history_layer_after_lost_log(tmp_path):
    tracker, log, pub = make(tmp_path)
    pub.publish(PublishItem("KAN-1", "run-1", "body"), set())
    log.path.unlink()
    fresh = Publisher(tracker, ReceiptLog(log.path, pub.clock), pub.clock, LaneId.LANE6)
    out = fresh.publish(PublishItem("KAN-1", "run-2", "body"), set())
    assert (out.kind, out.layer) == (OutcomeKind.SUPPRESSED, DedupLayer.COMMENT_HISTORY)
    assert len(tracker.peek("KAN-1").comments) == 1


def test_breaker_opens_after_exactly_three(tmp_path):
    tracker, log, pub = make(tmp_path)
    pub.begin_run("run-1")
    assert pub.publish(PublishItem("KAN-1", "run-1", "ok before outage")).kind is OutcomeKind.POSTED
    tracker.forced_down = True
    for i in range(2):
        assert pub.publish(PublishItem("KAN-2", "run-1", f"f{i}")).kind is OutcomeKind.FAILED
        assert pub.breaker.state is BreakerState.CLOSED
    assert pub.publish(PublishItem("KAN-2", "run-1", "f2")).kind is OutcomeKind.FAILED
    assert pub.breaker.is_open
    tracker.forced_down = False
    out = pub.publish(PublishItem("KAN-3", "run-1", "would work"))
    assert (out.kind, out.reason) == (OutcomeKind.SKIPPED, "CircuitOpen")
    # salvage: the earlier post keeps its receipt
    assert [r.ticket_key for r in log.receipts()] == ["KAN-1"]
    # a new run closes the breaker
    assert pub.publish(PublishItem("KAN-3", "run-2", "would work")).kind is OutcomeKind.POSTED


def test_malformed_items_count_as_failures(tmp_path):
    tracker, _, pub = make(tmp_path)
    pub.begin_run("r")
    calls = tracker.total_calls()
    for _ in range(3):
        assert pub.publish(PublishItem("KAN-1", "r", "  ")).kind is OutcomeKind.FAILED
    assert pub.breaker.is_open and tracker.total_calls() == calls
    bad = PublishItem("KAN-1", "r", "x", PublishAction(ActionKind.TRANSITION))
    assert bad.problems() == ["transition action needs transition and expected_from"]


def test_success_resets_breaker():
    b = CircuitBreaker()
    b.record_failure(), b.record_failure(), b.record_success(), b.record_failure(), b.record_failure()
    assert b.state is BreakerState.CLOSED
    b.record_failure()
    assert b.is_open


@pytest.mark.parametrize("verdict,tid", [(Verdict.PASS, 41), (Verdict.FAIL, 11), (Verdict.NEEDS_HUMAN, 31)])
def test_routing(verdict, tid):
    assert int(route_outcome(verdict)) == tid


def test_transition_publish_and_receipt(tmp_path):
    tracker, log, pub = make(tmp_path)
    tracker.transition("KAN-1", TransitionId.IN_PROGRESS, LaneId.LANE4, TicketStatus.TODO, "r0")
    item = PublishItem("KAN-1", "r1", "Pass", PublishAction.move(41, TicketStatus.IN_PROGRESS, verified=True), "r1/4")
    out = pub.publish(item, set())
    assert out.kind is OutcomeKind.POSTED and out.receipt.transition_id is TransitionId.DONE
    rec = tracker.peek("KAN-1")
    assert rec.status is TicketStatus.DONE and rec.transition_log[-1].evidence_permalink == "r1/4"
    assert log.receipts()[0].evidence_permalink == "r1/4"


def test_transition_already_applied_is_not_a_failure(tmp_path):
    tracker, log, pub = make(tmp_path)
    tracker.transition("KAN-1", TransitionId.IN_PROGRESS, LaneId.LANE4, TicketStatus.TODO, "r0")
    tracker.transition("KAN-1", TransitionId.ON_HOLD, LaneId.LANE6, TicketStatus.IN_PROGRESS, "r0")
    item = PublishItem("KAN-1", "r1", "hold", PublishAction.move(31, TicketStatus.IN_PROGRESS))
    assert pub.publish(item, set()).kind is OutcomeKind.POSTED


def test_degraded_publish_is_queued_without_receipt(tmp_path):
    tracker, log, pub = make(tmp_path, coordinator=True)
    tracker.forced_down = True
    out = pub.publish(PublishItem("KAN-1", "r", "body"), set())
    assert out.kind is OutcomeKind.QUEUED
    assert log.receipts() == []
    assert not pub.breaker.is_open


def test_digest_excludes_run_id():
    a = PublishItem("KAN-1", "r1", "body")
    b = PublishItem("KAN-1", "r2", "body")
    assert a.content_digest == b.content_digest
    assert a.content_digest != PublishItem("KAN-2", "r1", "body").content_digest


stream = st.lists(st.tuples(st.integers(1, 4), st.integers(0, 3), st.sampled_from(["run-a", "run-b"]),
                            st.booleans()), max_size=40)


@settings(max_examples=60)
@given(stream)
def test_replayed_streams_never_duplicate(tmp_path_factory, items):
    """Each element may crash the publisher right after it (fresh process, lost run cache)."""
    tracker, log, pub = make(tmp_path_factory.mktemp("p"))
    cache: set = set()
    posted = Counter()
    for ticket, body, run, crash in items + items:
        item = PublishItem(f"KAN-{ticket}", run, f"result {body}")
        if pub.publish(item, cache).kind is OutcomeKind.POSTED:
            posted[(item.ticket_key, item.content_digest)] += 1
        if crash:
            pub = Publisher(tracker, ReceiptLog(log.path, pub.clock), pub.clock, LaneId.LANE6)
            cache = set()
    assert all(v == 1 for v in posted.values())
    digests = posted_digests(tracker)
    assert len(digests) == len(set(digests)) == len(posted)
    assert len(ReceiptLog(log.path, pub.clock).receipts()) == len(posted)
