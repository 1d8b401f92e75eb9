"""Everything a lane cycle needs, rooted in one state directory."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Callable

from .backlog import BacklogStore, FingerprintIndex
from .clock import VirtualClock, format_ts, parse_ts
from .config import DeploymentConfig
from .degraded import CallResult, DegradedCoordinator, TrackerCall
from .evidence import EvidenceChain, TerminalStatus
from .fsm import LaneId
from .locks import FileLockStore, LockManager, os_pid_alive
from .publisher import CircuitBreaker, Publisher, ReceiptLog
from .scheduler import (
    BackoffPolicy,
    ScriptedExecutor,
    ScriptedVerifier,
    TaskBehavior,
    VerifierBehavior,
    WorkspaceManager,
    retry_call,
)
from .tracker import RateLimited, Tracker
from .watchdog import DigestWriter, EvaluationWindow

logger = logging.getLogger(__name__)


@dataclass
class RunReport:
    run_id: str
    lane: LaneId
    started_at: datetime
    ended_at: datetime
    terminal_status: TerminalStatus | None
    alerts: list[str] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=dict)
    error: str | None = None
    skipped: bool = False
    evidence_seq: int | None = None

    @property
    def exit_code(self) -> int:
        return 1 if self.terminal_status is TerminalStatus.FAILED else 0

    def events_of(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["type"] == kind]

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "lane": self.lane.value,
            "started_at": format_ts(self.started_at),
            "ended_at": format_ts(self.ended_at),
            "terminal_status": self.terminal_status.value if self.terminal_status else None,
            "alerts": self.alerts,
            "events": self.events,
            "counters": self.counters,
            "error": self.error,
            "skipped": self.skipped,
            "evidence_seq": self.evidence_seq,
        }


class ReportStore:
    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def write(self, report: RunReport) -> Path:
        d = self.root / report.lane.value
        d.mkdir(parents=True, exist_ok=True)
        body = json.dumps(report.to_json(), indent=2, sort_keys=True)
        path = d / f"{report.run_id}.json"
        path.write_text(body, encoding="utf-8")
        (d / "latest.json").write_text(body, encoding="utf-8")
        return path

    def latest(self, lane: LaneId) -> dict | None:
        path = self.root / lane.value / "latest.json"
        if not path.exists():
            return None
        return json.loads(path.read_text("utf-8"))

    def last_times(self) -> dict[LaneId, datetime | None]:
        out: dict[LaneId, datetime | None] = {}
        for lane in LaneId:
            raw = self.latest(lane)
            out[lane] = parse_ts(raw["ended_at"]) if raw else None
        return out


def executor_from_config(raw: dict | None) -> ScriptedExecutor:
    raw = raw or {}
    default = TaskBehavior.from_json(raw.get("default", {}))
    tickets = {k: TaskBehavior.from_json(v) for k, v in raw.get("tickets", {}).items()}
    return ScriptedExecutor(tickets, default)


def verifier_from_config(raw: dict | None) -> ScriptedVerifier:
    raw = raw or {}
    default = VerifierBehavior.from_json(raw.get("default", {}))
    tickets = {k: VerifierBehavior.from_json(v) for k, v in raw.get("tickets", {}).items()}
    return ScriptedVerifier(tickets, default)


class Deployment:
    """State directory layout plus the shared services every lane uses."""

    def __init__(
        self,
        state_dir: str | Path,
        config: DeploymentConfig,
        clock: VirtualClock,
        tracker: Tracker,
        seed: int = 0,
        executor: ScriptedExecutor | None = None,
        verifier: ScriptedVerifier | None = None,
        liveness: Callable[[int], bool] = os_pid_alive,
    ) -> None:
        self.root = Path(state_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.clock = clock
        self.tracker = tracker
        self.seed = seed
        self.executor = executor or executor_from_config(config.raw.get("executor"))
        self.verifier = verifier or verifier_from_config(config.raw.get("verifier"))
        self.locks = LockManager(FileLockStore(self.root / "locks"), liveness, config.skew_tolerance)
        self.coordinator = DegradedCoordinator(self.root / "degraded", clock, config.sentinel_key)
        self.chain = EvidenceChain(self.root / "evidence" / "chain.jsonl")
        self.backoff = replace(config.backoff, rng_seed=seed)
        self.receipts = ReceiptLog(
            self.root / "receipts.jsonl", clock, self.locks, BackoffPolicy(0.5, 8.0, 0.1, rng_seed=seed + 1)
        )
        self.backlog = BacklogStore(self.root / "backlog")
        self.fingerprints = FingerprintIndex(self.root / "fingerprints.json")
        self.sources = self.root / "sources"
        self.fix_queue_path = self.root / "fix_queue.jsonl"
        self.findings_path = self.root / "lane_02_untracked_findings.json"
        self.audit_input = self.root / "audit_input.json"
        self.spec_input = self.root / "spec_observations.json"
        self.repo = self.root / "repo"
        if not self.repo.exists():
            self.repo.mkdir(parents=True)
            (self.repo / "README.txt").write_text("managed application placeholder\n", encoding="utf-8")
        self.worktrees = WorkspaceManager(self.root / "worktrees", self.repo)
        self.ready_dir = self.root / "ready_for_verify"
        self.reports = ReportStore(self.root / "reports")
        self.digests = DigestWriter(self.root / "digests")
        self.window = EvaluationWindow(self.root / "evaluation_window.json", config.evaluation_window)
        self.history: list[RunReport] = []

    def tracker_call(self, lane: LaneId, call: TrackerCall, on_retry: Callable | None = None) -> CallResult:
        """Guarded call with jittered back-off on rate limiting."""
        return retry_call(
            lambda: self.coordinator.call(lane, call, self.tracker),
            self.backoff,
            self.clock,
            retry_limit=self.config.retry_limit,
            retryable=(RateLimited,),
            on_retry=on_retry,
        )

    def publisher(self, lane: LaneId, run_id: str) -> Publisher:
        pub = Publisher(
            self.tracker,
            self.receipts,
            self.clock,
            lane=lane,
            coordinator=self.coordinator,
            breaker=CircuitBreaker(self.config.breaker_threshold),
            backoff=self.backoff,
        )
        pub.begin_run(run_id)
        return pub

    def run_id(self, lane: LaneId) -> str:
        return f"{lane.value}-{self.clock.now():%Y%m%dT%H%M%S}-{len(self.chain):04d}"

    def ready_marker(self, key: str) -> Path:
        return self.ready_dir / f"{key}.json"

    def write_ready(self, key: str, payload: dict[str, Any]) -> None:
        self.ready_dir.mkdir(parents=True, exist_ok=True)
        self.ready_marker(key).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
