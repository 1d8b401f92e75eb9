"""Injectable clocks and RFC 3339 helpers."""

from __future__ import annotations

import threading
from datetime import datetime, timedelta, timezone
from typing import Protocol

UTC = timezone.utc


class Clock(Protocol):
    def now(self) -> datetime: ...

    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    def now(self) -> datetime:
        return datetime.now(UTC)

    def sleep(self, seconds: float) -> None:
        import time

        time.sleep(max(0.0, seconds))


class VirtualClock:
    """Manually advanced clock. ``sleep`` advances time instead of blocking."""

    def __init__(self, start: datetime | str | None = None) -> None:
        if start is None:
            start = datetime(2026, 3, 1, tzinfo=UTC)
        elif isinstance(start, str):
            start = parse_ts(start)
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> datetime:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> datetime:
        if seconds < 0:
            raise ValueError("virtual time cannot run backwards")
        with self._lock:
            self._now = self._now + timedelta(seconds=seconds)
            return self._now

    def advance_to(self, when: datetime) -> datetime:
        with self._lock:
            if when > self._now:
                self._now = when
            return self._now

    def sleep(self, seconds: float) -> None:
        self.advance(max(0.0, seconds))

    def fork(self) -> VirtualClock:
        return VirtualClock(self.now())


def format_ts(ts: datetime) -> str:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=UTC)
    ts = ts.astimezone(UTC)
    if ts.microsecond:
        return ts.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_ts(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=UTC)
    return ts.astimezone(UTC)
