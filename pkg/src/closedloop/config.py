"""Deployment configuration: bundled defaults overlaid with an operator file."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from datetime import timedelta
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .backlog import FamilyPolicy, UnknownFamily, parse_family
from .fsm import LaneId
from .matcher import Thresholds
from .scheduler import BackoffPolicy, TimeBudget


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LaneConfig:
    lane: LaneId
    cadence: timedelta
    lock_ttl: timedelta
    max_workers: int
    budget: timedelta
    t_avg: timedelta
    deep_budget: timedelta | None = None

    def time_budget(self, deep: bool = False) -> TimeBudget:
        total = self.deep_budget if deep and self.deep_budget else self.budget
        if total <= timedelta(minutes=20):
            # short lanes: checkpoints scale down with the budget
            return TimeBudget(total, total / 4, total / 2)
        return TimeBudget(budget=total)


@dataclass(frozen=True)
class WatchdogConfig:
    in_progress_warning: timedelta = timedelta(hours=4)
    in_progress_critical: timedelta = timedelta(hours=10)
    on_hold_warning: timedelta = timedelta(hours=48)
    report_staleness_factor: float = 2.0


@dataclass(frozen=True)
class DeploymentConfig:
    project: str
    lanes: dict[LaneId, LaneConfig]
    families: FamilyPolicy
    thresholds: Thresholds
    drain_batch: int
    breaker_threshold: int
    backoff: BackoffPolicy
    retry_limit: int
    skew_tolerance: timedelta
    watchdog: WatchdogConfig
    audit_rate: float
    audit_lanes: frozenset[LaneId]
    sentinel_key: str | None = None
    evaluation_window: dict | None = None
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def lane(self, lane: LaneId) -> LaneConfig:
        return self.lanes[lane]


def default_mapping() -> dict:
    text = resources.files("closedloop.defaults").joinpath("config.json").read_text("utf-8")
    return json.loads(text)


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _minutes(raw: Mapping, key: str, lane: str) -> timedelta:
    try:
        value = float(raw[key])
    except KeyError:
        raise ConfigError(f"{lane}: missing {key}") from None
    except (TypeError, ValueError):
        raise ConfigError(f"{lane}: {key} must be a number") from None
    if value <= 0:
        raise ConfigError(f"{lane}: {key} must be positive")
    return timedelta(minutes=value)


def build_config(raw: Mapping[str, Any]) -> DeploymentConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config root must be an object")
    lanes: dict[LaneId, LaneConfig] = {}
    for name, spec in raw.get("lanes", {}).items():
        try:
            lane = LaneId.parse(name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        workers = spec.get("max_workers", 1)
        if not isinstance(workers, int) or workers < 1:
            raise ConfigError(f"{name}: max_workers must be a positive integer")
        deep = _minutes(spec, "deep_budget_minutes", name) if "deep_budget_minutes" in spec else None
        lanes[lane] = LaneConfig(
            lane,
            _minutes(spec, "cadence_minutes", name),
            _minutes(spec, "lock_ttl_minutes", name),
            workers,
            _minutes(spec, "budget_minutes", name),
            _minutes(spec, "t_avg_minutes", name),
            deep,
        )
    missing = [l.value for l in LaneId if l not in lanes]
    if missing:
        raise ConfigError(f"lanes missing from config: {missing}")
    try:
        authorized = [parse_family(f) for f in raw.get("autonomy_authorized", [])]
    except UnknownFamily as exc:
        raise ConfigError(str(exc)) from None
    th = raw.get("thresholds", {})
    thresholds = Thresholds(
        float(th.get("autonomous", 0.83)), float(th.get("review", 0.50)), float(th.get("fuzzy", 0.83))
    )
    if not 0.0 <= thresholds.review <= thresholds.autonomous <= 1.0:
        raise ConfigError("thresholds must satisfy 0 <= review <= autonomous <= 1")
    bo = raw.get("backoff", {})
    try:
        backoff = BackoffPolicy(float(bo.get("t0_seconds", 1.0)), float(bo.get("t_max_seconds", 60.0)),
                                float(bo.get("jitter_fraction", 0.1)))
    except ValueError as exc:
        raise ConfigError(f"backoff: {exc}") from None
    wd = raw.get("watchdog", {})
    watchdog = WatchdogConfig(
        timedelta(hours=float(wd.get("in_progress_warning_hours", 4))),
        timedelta(hours=float(wd.get("in_progress_critical_hours", 10))),
        timedelta(hours=float(wd.get("on_hold_warning_hours", 48))),
        float(wd.get("report_staleness_factor", 2)),
    )
    if watchdog.in_progress_warning >= watchdog.in_progress_critical:
        raise ConfigError("watchdog: warning threshold must be below critical")
    audit = raw.get("dependency_audit", {})
    rate = float(audit.get("rate", 0.0))
    if not 0.0 <= rate <= 1.0:
        raise ConfigError("dependency_audit.rate must lie in [0, 1]")
    drain_batch = int(raw.get("drain_batch", 20))
    if drain_batch < 1:
        raise ConfigError("drain_batch must be positive")
    project = str(raw.get("project", "KAN"))
    if not project.isalnum() or not project.isupper():
        raise ConfigError("project key must be upper-case alphanumeric")
    return DeploymentConfig(
        project=project,
        lanes=lanes,
        families=FamilyPolicy(frozenset(authorized)),
        thresholds=thresholds,
        drain_batch=drain_batch,
        breaker_threshold=int(raw.get("breaker_threshold", 3)),
        backoff=backoff,
        retry_limit=int(bo.get("retry_limit", 3)),
        skew_tolerance=timedelta(seconds=float(raw.get("lock_skew_tolerance_seconds", 300))),
        watchdog=watchdog,
        audit_rate=rate,
        audit_lanes=frozenset(LaneId.parse(l) for l in audit.get("lanes", ["Lane6"])),
        sentinel_key=raw.get("sentinel_key"),
        evaluation_window=raw.get("evaluation_window"),
        raw=dict(raw),
    )


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> DeploymentConfig:
    """Defaults, then the file at ``path``, then ``overrides``."""
    raw = default_mapping()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text("utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
        raw = _merge(raw, user)
    if overrides:
        raw = _merge(raw, overrides)
    try:
        return build_config(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(str(exc)) from None
