"""Lane execution engine: worker-pool sizing, backoff, time budgets and workspaces."""

from __future__ import annotations

import hashlib
import logging
import math
import os
import random
import shutil
import threading
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Protocol, TypeVar

from .clock import Clock, VirtualClock
from .matcher import DomainError
from .tracker import RateLimited

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class WorkerPoolPlan:
    actionable: int
    max_workers: int
    t_remain: timedelta
    t_avg: timedelta
    workers: int


def plan_workers(actionable: int, max_workers: int, t_remain: timedelta, t_avg: timedelta) -> WorkerPoolPlan:
    if t_avg <= timedelta(0):
        raise DomainError("t_avg must be positive")
    by_time = max(0, math.floor(t_remain / t_avg))
    workers = max(0, min(actionable, max_workers, by_time))
    return WorkerPoolPlan(actionable, max_workers, t_remain, t_avg, workers)


@dataclass
class BackoffPolicy:
    t0: float = 1.0
    t_max: float = 60.0
    jitter_fraction: float = 0.10
    rng_seed: int = 0

    def __post_init__(self) -> None:
        self._rng = random.Random(self.rng_seed)

    def reset(self) -> None:
        self._rng = random.Random(self.rng_seed)

    def base(self, n: int) -> float:
        if n < 0:
            raise DomainError("attempt index must be >= 0")
        # cap the exponent first so huge n cannot overflow
        if n >= 64:
            return self.t_max
        return min(self.t_max, self.t0 * 2**n)

    def draw_epsilon(self) -> float:
        return self._rng.uniform(-self.jitter_fraction, self.jitter_fraction)


def backoff_delay(n: int, policy: BackoffPolicy, epsilon: float | None = None) -> float:
    """Delay in seconds before retry ``n``: ``min(t_max, t0*2**n) * (1 + eps)``."""
    base = policy.base(n)
    eps = policy.draw_epsilon() if epsilon is None else epsilon
    return base * (1.0 + eps)


def retry_call(
    fn: Callable[[], T],
    policy: BackoffPolicy,
    clock: Clock,
    retry_limit: int = 3,
    retryable: tuple[type[BaseException], ...] = (RateLimited,),
    on_retry: Callable[[int, float, BaseException], None] | None = None,
) -> T:
    attempt = 0
    while True:
        try:
            return fn()
        except retryable as exc:
            if attempt >= retry_limit:
                raise
            delay = backoff_delay(attempt, policy)
            if on_retry:
                on_retry(attempt, delay, exc)
            clock.sleep(delay)
            attempt += 1


@dataclass(frozen=True)
class TimeBudget:
    budget: timedelta = timedelta(minutes=45)
    checkpoint_at: timedelta = timedelta(minutes=10)
    extended_checkpoint: timedelta = timedelta(minutes=20)
    grace: timedelta = timedelta(seconds=30)

    def __post_init__(self) -> None:
        if not self.checkpoint_at < self.extended_checkpoint < self.budget:
            raise DomainError("require checkpoint_at < extended_checkpoint < budget")

    @classmethod
    def standard(cls) -> TimeBudget:
        return cls()

    @classmethod
    def deep_sweep(cls) -> TimeBudget:
        return cls(budget=timedelta(minutes=120))


class ExecutableUnit(Protocol):
    def advance(self, now: datetime) -> bool:
        """Do work up to ``now``; True once the unit has exited."""

    def progress(self) -> int: ...

    def warn(self) -> None: ...

    def kill(self) -> None: ...


class OutcomeStatus(Enum):
    COMPLETED = "Completed"
    BUDGET_EXHAUSTED = "BudgetExhausted"
    FAILED = "Failed"


@dataclass
class TaskOutcome:
    status: OutcomeStatus
    started_at: datetime
    ended_at: datetime
    warned_at: datetime | None = None
    killed: bool = False
    reason: str = ""
    checkpoints_passed: int = 0
    error: BaseException | None = None

    @property
    def elapsed(self) -> timedelta:
        return self.ended_at - self.started_at


def run_with_budget(
    task: ExecutableUnit,
    budget: TimeBudget,
    clock: VirtualClock,
    progress_probe: Callable[[], int] | None = None,
    hard_stop: datetime | None = None,
    tick: timedelta = timedelta(seconds=60),
) -> TaskOutcome:
    """Drive ``task`` on a virtual clock under the checkpoint model.

    At the first checkpoint a task with no forward progress is stopped; with
    progress the deadline moves to the extended checkpoint, where the same
    test applies once more before the task may run to the full budget. A stop
    sends a warning, waits the grace period, then force-terminates.
    """
    probe = progress_probe or task.progress
    start = clock.now()
    stop_at = start + budget.budget
    if hard_stop is not None:
        stop_at = min(stop_at, hard_stop)
    checkpoints = deque(cp for cp in (start + budget.checkpoint_at, start + budget.extended_checkpoint) if cp < stop_at)
    last_progress = probe()
    passed = 0

    def poll(now: datetime) -> bool:
        return task.advance(now)

    reason = "budget"
    try:
        while True:
            now = clock.now()
            if poll(now):
                return TaskOutcome(OutcomeStatus.COMPLETED, start, now, checkpoints_passed=passed)
            if now >= stop_at:
                break
            if checkpoints and now >= checkpoints[0]:
                checkpoints.popleft()
                current = probe()
                if current <= last_progress:
                    reason = f"no progress at checkpoint {passed + 1}"
                    break
                last_progress = current
                passed += 1
                continue
            targets = [now + tick, stop_at]
            if checkpoints:
                targets.append(checkpoints[0])
            clock.advance_to(min(targets))
    except Exception as exc:  # noqa: BLE001 - any task error is a Failed outcome
        logger.warning("task failed: %s", exc)
        return TaskOutcome(OutcomeStatus.FAILED, start, clock.now(), reason=str(exc), checkpoints_passed=passed, error=exc)

    warned_at = clock.now()
    task.warn()
    kill_at = warned_at + budget.grace
    try:
        while True:
            now = clock.now()
            if poll(now):
                return TaskOutcome(OutcomeStatus.BUDGET_EXHAUSTED, start, now, warned_at, False, reason, passed)
            if now >= kill_at:
                break
            clock.advance_to(min(now + tick, kill_at))
    except Exception as exc:  # noqa: BLE001
        return TaskOutcome(OutcomeStatus.FAILED, start, clock.now(), warned_at, reason=str(exc), error=exc)
    task.kill()
    return TaskOutcome(OutcomeStatus.BUDGET_EXHAUSTED, start, clock.now(), warned_at, True, reason, passed)


# workspaces


class PlanKind(Enum):
    APPLY = "Apply"
    VERIFY_ONLY = "VerifyOnly"
    MANUAL = "Manual"


class MutatedStateFailure(Exception):
    """A verify-only plan changed its workspace; route to human review."""

    def __init__(self, workspace_id: str, pre: str, post: str) -> None:
        super().__init__(f"FAIL_VERIFY_MUTATED_STATE in {workspace_id}: {pre[:12]} -> {post[:12]}")
        self.workspace_id = workspace_id
        self.pre_digest = pre
        self.post_digest = post


def tree_digest(root: str | Path) -> str:
    """SHA-256 over every path, entry type and file byte under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root, followlinks=False):
        dirnames.sort()
        rel_dir = os.path.relpath(dirpath, root)
        h.update(b"D\0" + rel_dir.encode() + b"\0")
        for name in sorted(filenames + [d for d in dirnames if os.path.islink(os.path.join(dirpath, d))]):
            full = os.path.join(dirpath, name)
            rel = os.path.normpath(os.path.join(rel_dir, name)).encode()
            if os.path.islink(full):
                h.update(b"L\0" + rel + b"\0" + os.readlink(full).encode() + b"\0")
                continue
            h.update(b"F\0" + rel + b"\0")
            with open(full, "rb") as fh:
                data = fh.read()
            h.update(len(data).to_bytes(8, "big"))
            h.update(data)
    return h.hexdigest()


@dataclass
class Workspace:
    id: str
    root: Path
    plan_kind: PlanKind
    pre_digest: str | None = None
    post_digest: str | None = None

    def record_pre(self) -> str:
        self.pre_digest = tree_digest(self.root)
        return self.pre_digest

    def record_post(self) -> str:
        self.post_digest = tree_digest(self.root)
        return self.post_digest


class Verified(Enum):
    VERIFIED = "Verified"


def verify_workspace(ws: Workspace) -> Verified:
    if ws.pre_digest is None:
        raise ValueError(f"workspace {ws.id} has no pre-execution digest")
    post = ws.post_digest or ws.record_post()
    if ws.plan_kind is PlanKind.VERIFY_ONLY and post != ws.pre_digest:
        raise MutatedStateFailure(ws.id, ws.pre_digest, post)
    return Verified.VERIFIED


class WorkspaceManager:
    """Isolated per-ticket copies of a source tree."""

    def __init__(self, base_dir: str | Path, source_dir: str | Path | None = None) -> None:
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)
        self.source_dir = Path(source_dir) if source_dir else None

    def path_for(self, ws_id: str) -> Path:
        return self.base_dir / ws_id.replace("/", "_")

    def create(self, ws_id: str, plan_kind: PlanKind = PlanKind.APPLY) -> Workspace:
        root = self.path_for(ws_id)
        if root.exists():
            shutil.rmtree(root)
        if self.source_dir and self.source_dir.exists():
            shutil.copytree(self.source_dir, root, symlinks=True)
        else:
            root.mkdir(parents=True)
        ws = Workspace(ws_id, root, plan_kind)
        ws.record_pre()
        return ws

    def open(self, ws_id: str, plan_kind: PlanKind) -> Workspace | None:
        root = self.path_for(ws_id)
        if not root.exists():
            return None
        return Workspace(ws_id, root, plan_kind)

    def discard(self, ws: Workspace | str) -> None:
        root = ws.root if isinstance(ws, Workspace) else self.path_for(ws)
        shutil.rmtree(root, ignore_errors=True)


class ScrutinyTier(Enum):
    STANDARD = "Standard"
    EXTENDED = "Extended"
    HUMAN_REVIEW = "HumanReview"


def scrutiny_tier(diff_lines: int) -> ScrutinyTier:
    if diff_lines < 50:
        return ScrutinyTier.STANDARD
    if diff_lines <= 200:
        return ScrutinyTier.EXTENDED
    return ScrutinyTier.HUMAN_REVIEW


class ClaimQueue:
    """Per-lane work queue; a ticket is handed to at most one worker per cycle."""

    def __init__(self, entries: Iterable[T], key: Callable[[T], str]) -> None:
        self._pending = deque(entries)
        self._key = key
        self._claimed: dict[str, str] = {}
        self._mutex = threading.Lock()
        self.skipped: list[tuple[str, str]] = []

    def pop(self, worker: str):
        with self._mutex:
            while self._pending:
                entry = self._pending.popleft()
                k = self._key(entry)
                if k in self._claimed:
                    self.skipped.append((worker, k))
                    continue
                self._claimed[k] = worker
                return entry
            return None

    def claimed(self) -> dict[str, str]:
        with self._mutex:
            return dict(self._claimed)

    def __len__(self) -> int:
        with self._mutex:
            return len(self._pending)


# executor / verifier stubs


@dataclass
class TaskBehavior:
    duration_minutes: float = 5.0
    makes_progress: bool = True
    stall_after_minutes: float | None = None
    ignores_warning: bool = False
    fails: bool = False
    diff_lines: int = 10

    @classmethod
    def from_json(cls, raw: dict) -> TaskBehavior:
        return cls(**{k: v for k, v in raw.items() if k in cls.__dataclass_fields__})


@dataclass
class ExecutionReport:
    ticket_key: str
    diff_lines: int
    changed_files: list[str] = field(default_factory=list)


class StubTask:
    """Executable unit whose behaviour is scripted; writes its change on completion."""

    def __init__(self, key: str, behavior: TaskBehavior, workspace: Workspace, start: datetime) -> None:
        self.key = key
        self.behavior = behavior
        self.workspace = workspace
        self.start = start
        self._now = start
        self._warned = False
        self._killed = False
        self.report: ExecutionReport | None = None

    def _elapsed_min(self) -> float:
        return (self._now - self.start).total_seconds() / 60.0

    def advance(self, now: datetime) -> bool:
        if self._killed:
            return True
        self._now = now
        if self.behavior.fails and self._elapsed_min() >= min(1.0, self.behavior.duration_minutes):
            raise RuntimeError(f"executor crashed on {self.key}")
        if self._warned and not self.behavior.ignores_warning:
            return True
        if self._elapsed_min() >= self.behavior.duration_minutes and not self._warned:
            self._write_change()
            return True
        return False

    def _write_change(self) -> None:
        rel = f"changes/{self.key}.patch"
        target = self.workspace.root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text("".join(f"+ line {i}\n" for i in range(self.behavior.diff_lines)), encoding="utf-8")
        self.report = ExecutionReport(self.key, self.behavior.diff_lines, [rel])

    def progress(self) -> int:
        if not self.behavior.makes_progress:
            return 0
        minutes = self._elapsed_min()
        if self.behavior.stall_after_minutes is not None:
            minutes = min(minutes, self.behavior.stall_after_minutes)
        return int(minutes)

    def warn(self) -> None:
        self._warned = True

    def kill(self) -> None:
        self._killed = True


class Executor(Protocol):
    def prepare(self, ticket_key: str, workspace: Workspace, start: datetime) -> StubTask: ...


class ScriptedExecutor:
    def __init__(self, behaviors: dict[str, TaskBehavior] | None = None, default: TaskBehavior | None = None) -> None:
        self.behaviors = behaviors or {}
        self.default = default or TaskBehavior()

    def prepare(self, ticket_key: str, workspace: Workspace, start: datetime) -> StubTask:
        return StubTask(ticket_key, self.behaviors.get(ticket_key, self.default), workspace, start)


class Verdict(Enum):
    PASS = "Pass"
    FAIL = "Fail"
    NEEDS_HUMAN = "NeedsHuman"


@dataclass
class VerifierResult:
    verdict: Verdict
    informational_alerts: list[str] = field(default_factory=list)


class Verifier(Protocol):
    def verify(self, ticket_key: str, workspace: Workspace) -> VerifierResult: ...


@dataclass
class VerifierBehavior:
    verdict: Verdict = Verdict.PASS
    mutate: bool = False

    @classmethod
    def from_json(cls, raw: dict) -> VerifierBehavior:
        return cls(Verdict(raw.get("verdict", "Pass")), bool(raw.get("mutate", False)))


class ScriptedVerifier:
    """Product/security verifier stand-in; ``mutate`` simulates a misbehaving verifier."""

    def __init__(self, behaviors: dict[str, VerifierBehavior] | None = None, default: VerifierBehavior | None = None) -> None:
        self.behaviors = behaviors or {}
        self.default = default or VerifierBehavior()

    def verify(self, ticket_key: str, workspace: Workspace) -> VerifierResult:
        behavior = self.behaviors.get(ticket_key, self.default)
        if behavior.mutate:
            (workspace.root / "verifier-autofix.txt").write_text("lint auto-fix applied\n", encoding="utf-8")
        return VerifierResult(behavior.verdict)
