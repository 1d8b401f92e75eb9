"""TTL locks with PID verification, clock-skew clamping and race-safe stale clearing.

Four operations make up the public surface: :meth:`LockManager.acquire`,
:meth:`LockManager.release`, :func:`is_stale` and
:meth:`LockManager.clear_stale_lock`. Stores never block: a contended
operation returns :class:`Contention` rather than waiting.
"""

from __future__ import annotations

import errno
import fcntl
import json
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Protocol

from .clock import format_ts, parse_ts

DEFAULT_SKEW_TOLERANCE = timedelta(minutes=5)


@dataclass(frozen=True)
class Lock:
    resource: str
    owner: str
    pid: int
    acquired_at: datetime
    ttl: timedelta

    def to_json(self) -> dict:
        return {
            "resource": self.resource,
            "owner": self.owner,
            "pid": self.pid,
            "acquired_at": format_ts(self.acquired_at),
            "ttl_seconds": self.ttl.total_seconds(),
        }

    @classmethod
    def from_json(cls, raw: dict) -> Lock:
        return cls(
            resource=raw["resource"],
            owner=raw["owner"],
            pid=int(raw["pid"]),
            acquired_at=parse_ts(raw["acquired_at"]),
            ttl=timedelta(seconds=float(raw["ttl_seconds"])),
        )

    def same_grant(self, other: Lock | None) -> bool:
        return (
            other is not None
            and self.owner == other.owner
            and self.pid == other.pid
            and self.acquired_at == other.acquired_at
        )


class Contention(Exception):
    def __init__(self, resource: str, holder: Lock | None) -> None:
        who = f"{holder.owner} (pid {holder.pid})" if holder else "a concurrent clearer"
        super().__init__(f"{resource} held by {who}")
        self.resource = resource
        self.holder = holder


class NotHeld(Exception):
    pass


LivenessProbe = Callable[[int], bool]


def os_pid_alive(pid: int) -> bool:
    if pid <= 0:
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class ProcessTable:
    """Deterministic liveness probe for simulation: pids are alive until killed."""

    def __init__(self) -> None:
        self._dead: set[int] = set()
        self._lock = threading.Lock()

    def kill(self, pid: int) -> None:
        with self._lock:
            self._dead.add(pid)

    def revive(self, pid: int) -> None:
        with self._lock:
            self._dead.discard(pid)

    def __call__(self, pid: int) -> bool:
        with self._lock:
            return pid not in self._dead


def clamped_age(acquired_at: datetime, now: datetime, skew_tolerance: timedelta = DEFAULT_SKEW_TOLERANCE) -> timedelta:
    """Lock age with future timestamps beyond the skew tolerance treated as now."""
    if acquired_at - now > skew_tolerance:
        acquired_at = now
    return now - acquired_at


def is_stale(
    lock: Lock,
    now: datetime,
    skew_tolerance: timedelta = DEFAULT_SKEW_TOLERANCE,
    alive: LivenessProbe = os_pid_alive,
) -> bool:
    if clamped_age(lock.acquired_at, now, skew_tolerance) > lock.ttl:
        return True
    return not alive(lock.pid)


class LockStore(Protocol):
    def read(self, resource: str) -> Lock | None: ...

    def create(self, lock: Lock) -> bool: ...

    def replace_if(self, expected: Lock, new: Lock | None, blocking: bool = False) -> bool: ...

    def list(self) -> list[Lock]: ...


class MemoryLockStore:
    def __init__(self) -> None:
        self._locks: dict[str, Lock] = {}
        self._mutex = threading.Lock()

    def read(self, resource: str) -> Lock | None:
        with self._mutex:
            return self._locks.get(resource)

    def create(self, lock: Lock) -> bool:
        with self._mutex:
            if lock.resource in self._locks:
                return False
            self._locks[lock.resource] = lock
            return True

    def replace_if(self, expected: Lock, new: Lock | None, blocking: bool = False) -> bool:
        with self._mutex:
            if not expected.same_grant(self._locks.get(expected.resource)):
                return False
            if new is None:
                del self._locks[expected.resource]
            else:
                self._locks[expected.resource] = new
            return True

    def list(self) -> list[Lock]:
        with self._mutex:
            return sorted(self._locks.values(), key=lambda lk: lk.resource)


class FileLockStore:
    """One JSON file per resource.

    Creation hard-links a fully written temp file onto the lock path, which is
    an atomic create-exclusive. Compare-and-replace runs under an ``flock`` on
    a sidecar guard file and swaps content with an atomic rename, so of
    several racing clearers exactly one succeeds.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, resource: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in resource)
        return self.root / f"{safe}.lock"

    def read(self, resource: str) -> Lock | None:
        try:
            text = self._path(resource).read_text("utf-8")
        except FileNotFoundError:
            return None
        return Lock.from_json(json.loads(text))

    def create(self, lock: Lock) -> bool:
        path = self._path(lock.resource)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.new")
        tmp.write_text(json.dumps(lock.to_json()), encoding="utf-8")
        try:
            os.link(tmp, path)
        except FileExistsError:
            return False
        finally:
            tmp.unlink(missing_ok=True)
        return True

    def replace_if(self, expected: Lock, new: Lock | None, blocking: bool = False) -> bool:
        path = self._path(expected.resource)
        # each os.open is its own open file description, so flock also
        # excludes threads of this process
        fd = os.open(path.with_suffix(".guard"), os.O_CREAT | os.O_RDWR, 0o644)
        try:
            try:
                fcntl.flock(fd, fcntl.LOCK_EX | (0 if blocking else fcntl.LOCK_NB))
            except OSError as exc:
                if exc.errno in (errno.EWOULDBLOCK, errno.EAGAIN):
                    return False
                raise
            if not expected.same_grant(self.read(expected.resource)):
                return False
            if new is None:
                path.unlink()
            else:
                tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.swap")
                tmp.write_text(json.dumps(new.to_json()), encoding="utf-8")
                os.replace(tmp, path)
            return True
        finally:
            os.close(fd)

    def list(self) -> list[Lock]:
        locks = []
        for path in sorted(self.root.glob("*.lock")):
            try:
                locks.append(Lock.from_json(json.loads(path.read_text("utf-8"))))
            except (FileNotFoundError, ValueError):
                continue
        return locks


class LockManager:
    def __init__(
        self,
        store: LockStore | None = None,
        alive: LivenessProbe = os_pid_alive,
        skew_tolerance: timedelta = DEFAULT_SKEW_TOLERANCE,
    ) -> None:
        self.store = store if store is not None else MemoryLockStore()
        self.alive = alive
        self.skew_tolerance = skew_tolerance

    def is_stale(self, lock: Lock, now: datetime) -> bool:
        return is_stale(lock, now, self.skew_tolerance, self.alive)

    def acquire(
        self,
        resource: str,
        owner: str,
        ttl: timedelta,
        now: datetime,
        pid: int | None = None,
    ) -> Lock:
        """Grant a lock or raise :class:`Contention`. Never waits."""
        if not resource:
            raise ValueError("empty resource key")
        lock = Lock(resource, owner, os.getpid() if pid is None else pid, now, ttl)
        if self.store.create(lock):
            return lock
        holder = self.store.read(resource)
        if holder is None:
            # released between our create and read; one retry, still bounded
            if self.store.create(lock):
                return lock
            raise Contention(resource, self.store.read(resource))
        if self.is_stale(holder, now):
            if self.store.replace_if(holder, lock):
                return lock
            raise Contention(resource, None)
        raise Contention(resource, holder)

    def release(self, lock: Lock) -> None:
        if not self.store.replace_if(lock, None, blocking=True):
            raise NotHeld(f"{lock.resource} no longer held by {lock.owner}")

    def clear_stale_lock(self, resource: str, now: datetime) -> bool:
        holder = self.store.read(resource)
        if holder is None or not self.is_stale(holder, now):
            return False
        return self.store.replace_if(holder, None)

    def holder(self, resource: str) -> Lock | None:
        return self.store.read(resource)

    def locks(self) -> list[Lock]:
        return self.store.list()


class LocalTicketLocks:
    """Offline ticket claims persisted to a single JSON document.

    Only consulted while the tracker is unreachable.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path else None
        self._mutex = threading.Lock()
        self._claims: dict[str, dict] = {}
        if self.path and self.path.exists():
            self._claims = json.loads(self.path.read_text("utf-8"))

    def _reload(self) -> None:
        if self.path and self.path.exists():
            self._claims = json.loads(self.path.read_text("utf-8"))

    def _save(self) -> None:
        if not self.path:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + f".{os.getpid()}.tmp")
        tmp.write_text(json.dumps(self._claims, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self.path)

    def _file_guard(self):
        if not self.path:
            return None
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.path.with_suffix(".guard"), os.O_CREAT | os.O_RDWR, 0o644)
        fcntl.flock(fd, fcntl.LOCK_EX)
        return fd

    def claim(self, key: str, owner: str, now: datetime) -> None:
        with self._mutex:
            fd = self._file_guard()
            try:
                self._reload()
                held = self._claims.get(key)
                if held is not None and held["owner"] != owner:
                    raise Contention(key, Lock(key, held["owner"], -1, parse_ts(held["acquired_at"]), timedelta(0)))
                self._claims[key] = {"owner": owner, "acquired_at": format_ts(now)}
                self._save()
            finally:
                if fd is not None:
                    os.close(fd)

    def release(self, key: str) -> None:
        with self._mutex:
            fd = self._file_guard()
            try:
                self._reload()
                self._claims.pop(key, None)
                self._save()
            finally:
                if fd is not None:
                    os.close(fd)

    def clear(self) -> dict[str, dict]:
        with self._mutex:
            fd = self._file_guard()
            try:
                self._reload()
                dropped, self._claims = self._claims, {}
                self._save()
                return dropped
            finally:
                if fd is not None:
                    os.close(fd)

    @property
    def claims(self) -> dict[str, dict]:
        with self._mutex:
            self._reload()
            return dict(self._claims)
