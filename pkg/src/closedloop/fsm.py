"""Pipeline and ticket-contract state machines.

Both transition functions are pure. Ticket-lane authority comes from a JSON
table so that widening a lane's scope is a configuration change, not a code
change. Two rules are structural and hold regardless of the table: a claim
(21) only ever leaves ToDo, and Done (41) requires verification approval.
"""

from __future__ import annotations

import json
from enum import Enum, IntEnum
from importlib import resources
from pathlib import Path
from typing import Mapping


class PipelineState(Enum):
    S0 = "S0"
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"
    S5 = "S5"
    S6 = "S6"
    S7_COMPLETE = "S7_Complete"
    FAILURE = "Failure"
    STALLED = "Stalled"


class PipelineEvent(Enum):
    STAGE_SUCCEEDED = "StageSucceeded"
    GATE_VIOLATED = "GateViolated"
    TIMEOUT_EXPIRED = "TimeoutExpired"
    UNCAUGHT_EXCEPTION = "UncaughtException"
    RETRY_SCHEDULED = "RetryScheduled"
    MANUAL_OVERRIDE = "ManualOverride"


class TicketStatus(Enum):
    TODO = "ToDo"
    IN_PROGRESS = "InProgress"
    ON_HOLD = "OnHold"
    DONE = "Done"


class TransitionId(IntEnum):
    TODO = 11
    IN_PROGRESS = 21
    ON_HOLD = 31
    DONE = 41

    @property
    def target(self) -> TicketStatus:
        return _TRANSITION_TARGET[self]

    @classmethod
    def for_target(cls, status: TicketStatus) -> TransitionId:
        for tid, target in _TRANSITION_TARGET.items():
            if target is status:
                return tid
        raise ValueError(status)


_TRANSITION_TARGET = {
    TransitionId.TODO: TicketStatus.TODO,
    TransitionId.IN_PROGRESS: TicketStatus.IN_PROGRESS,
    TransitionId.ON_HOLD: TicketStatus.ON_HOLD,
    TransitionId.DONE: TicketStatus.DONE,
}


class LaneId(Enum):
    LANE1 = "Lane1"
    LANE2 = "Lane2"
    LANE3 = "Lane3"
    LANE4 = "Lane4"
    LANE5 = "Lane5"
    LANE6 = "Lane6"
    LANE7 = "Lane7"

    @property
    def number(self) -> int:
        return int(self.value[4:])

    @classmethod
    def parse(cls, text: str | int | LaneId) -> LaneId:
        if isinstance(text, LaneId):
            return text
        raw = str(text).strip().lower()
        if raw.startswith("lane"):
            raw = raw[4:].lstrip("-_ ")
        try:
            return cls(f"Lane{int(raw)}")
        except ValueError:
            raise ValueError(f"unknown lane: {text!r}") from None


class IllegalTransition(Exception):
    def __init__(self, state: PipelineState, event: PipelineEvent) -> None:
        super().__init__(f"no transition from {state.value} on {event.value}")
        self.state = state
        self.event = event


class ViolationReason(Enum):
    UNAUTHORIZED_LANE = "UnauthorizedLane"
    CLAIM_FROM_NON_TODO = "ClaimFromNonToDo"
    REOPEN_TO_IN_PROGRESS_FORBIDDEN = "ReopenToInProgressForbidden"
    VERIFICATION_REQUIRED = "VerificationRequired"
    INVALID_SOURCE_STATUS = "InvalidSourceStatus"


class ContractViolation(Exception):
    def __init__(self, reason: ViolationReason, detail: str = "") -> None:
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail


_STAGES = [
    PipelineState.S0,
    PipelineState.S1,
    PipelineState.S2,
    PipelineState.S3,
    PipelineState.S4,
    PipelineState.S5,
    PipelineState.S6,
]
_FAILING_EVENTS = {
    PipelineEvent.GATE_VIOLATED,
    PipelineEvent.TIMEOUT_EXPIRED,
    PipelineEvent.UNCAUGHT_EXCEPTION,
}


def pipeline_step(state: PipelineState, event: PipelineEvent) -> PipelineState:
    if state in _STAGES:
        if event is PipelineEvent.STAGE_SUCCEEDED:
            idx = _STAGES.index(state)
            return _STAGES[idx + 1] if idx + 1 < len(_STAGES) else PipelineState.S7_COMPLETE
        if event in _FAILING_EVENTS:
            return PipelineState.FAILURE
    elif state is PipelineState.FAILURE:
        if event is PipelineEvent.RETRY_SCHEDULED:
            return PipelineState.STALLED
    elif state is PipelineState.STALLED:
        if event in (PipelineEvent.MANUAL_OVERRIDE, PipelineEvent.RETRY_SCHEDULED):
            return PipelineState.S0
    raise IllegalTransition(state, event)


class AuthorityTable:
    """Per-lane permitted ``(from_status, transition_id)`` pairs."""

    def __init__(self, grants: Mapping[LaneId, set[tuple[TicketStatus, TransitionId]]]) -> None:
        self._grants = {lane: frozenset(pairs) for lane, pairs in grants.items()}

    @classmethod
    def from_mapping(cls, raw: Mapping[str, list]) -> AuthorityTable:
        grants: dict[LaneId, set[tuple[TicketStatus, TransitionId]]] = {}
        for lane_name, pairs in raw.items():
            if lane_name.startswith("_"):
                continue
            lane = LaneId.parse(lane_name)
            grants[lane] = {(TicketStatus(src), TransitionId(int(tid))) for src, tid in pairs}
        return cls(grants)

    @classmethod
    def load(cls, path: str | Path) -> AuthorityTable:
        return cls.from_mapping(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> AuthorityTable:
        text = resources.files("closedloop.defaults").joinpath("authority.json").read_text("utf-8")
        return cls.from_mapping(json.loads(text))

    def permits(self, lane: LaneId, status: TicketStatus, transition: TransitionId) -> bool:
        return (status, transition) in self._grants.get(lane, ())

    def grants_transition(self, lane: LaneId, transition: TransitionId) -> bool:
        return any(t is transition for _, t in self._grants.get(lane, ()))

    def to_mapping(self) -> dict[str, list]:
        return {
            lane.value: sorted([s.value, int(t)] for s, t in pairs)
            for lane, pairs in sorted(self._grants.items(), key=lambda kv: kv[0].number)
        }


_DEFAULT_AUTHORITY: AuthorityTable | None = None


def default_authority() -> AuthorityTable:
    global _DEFAULT_AUTHORITY
    if _DEFAULT_AUTHORITY is None:
        _DEFAULT_AUTHORITY = AuthorityTable.default()
    return _DEFAULT_AUTHORITY


def ticket_step(
    status: TicketStatus,
    transition: TransitionId,
    actor: LaneId,
    *,
    verified: bool = False,
    authority: AuthorityTable | None = None,
) -> TicketStatus:
    """Apply one contract transition or raise :class:`ContractViolation`."""
    table = authority or default_authority()
    transition = TransitionId(transition)

    if transition is TransitionId.IN_PROGRESS:
        if not table.grants_transition(actor, transition):
            if status is not TicketStatus.TODO and table.grants_transition(actor, TransitionId.TODO):
                raise ContractViolation(
                    ViolationReason.REOPEN_TO_IN_PROGRESS_FORBIDDEN,
                    f"{actor.value} may only reopen to ToDo",
                )
            raise ContractViolation(ViolationReason.UNAUTHORIZED_LANE, f"{actor.value} cannot claim")
        if status is not TicketStatus.TODO or not table.permits(actor, status, transition):
            raise ContractViolation(ViolationReason.CLAIM_FROM_NON_TODO, f"status is {status.value}")
        return transition.target

    if not table.permits(actor, status, transition):
        if table.grants_transition(actor, transition):
            raise ContractViolation(
                ViolationReason.INVALID_SOURCE_STATUS,
                f"{actor.value} cannot apply {int(transition)} from {status.value}",
            )
        raise ContractViolation(
            ViolationReason.UNAUTHORIZED_LANE, f"{actor.value} lacks transition {int(transition)}"
        )
    if transition is TransitionId.DONE and not verified:
        raise ContractViolation(ViolationReason.VERIFICATION_REQUIRED)
    return transition.target


def is_legal_path(
    entries: list[tuple[TransitionId, LaneId, bool]],
    start: TicketStatus = TicketStatus.TODO,
    authority: AuthorityTable | None = None,
) -> bool:
    """Check a sequence of ``(transition, actor, verified)`` against the contract."""
    status = start
    for transition, actor, verified in entries:
        try:
            status = ticket_step(status, transition, actor, verified=verified, authority=authority)
        except ContractViolation:
            return False
    return True
