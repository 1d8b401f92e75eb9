"""Canonical backlog items, intake validation, fingerprinting and the versioned store."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .clock import format_ts, parse_ts
from .fsm import TicketStatus

logger = logging.getLogger(__name__)

QUALITY_FIELDS = ("id", "title", "description", "source_ref", "tags", "priority", "owner")
PRIORITY_RANGE = range(1, 6)


class FamilyName(Enum):
    KAN = "KAN"
    AUTO_DROP = "AUTO-DROP"
    EMU = "EMU"
    AUTO_CERT = "AUTO-CERT"
    AUTO_SEC = "AUTO-SEC"
    AUTO_OPS = "AUTO-OPS"
    AUTO_TECH = "AUTO-TECH"


# Retired during consolidation; records still carrying it must be migrated by hand.
RETIRED_FAMILIES = frozenset({"CERTREQ"})


@dataclass(frozen=True)
class Family:
    name: FamilyName
    autonomy_authorized: bool = False


class FamilyPolicy:
    """Which families may be acted on autonomously. Pure configuration."""

    def __init__(self, authorized: Iterable[FamilyName | str] = ()) -> None:
        self._authorized = frozenset(parse_family(f) for f in authorized)

    def family(self, name: FamilyName | str) -> Family:
        fam = parse_family(name)
        return Family(fam, fam in self._authorized)

    def is_authorized(self, name: FamilyName | str) -> bool:
        return parse_family(name) in self._authorized


class UnknownFamily(ValueError):
    def __init__(self, name: str) -> None:
        retired = name.upper() in RETIRED_FAMILIES
        super().__init__(f"{'retired' if retired else 'unknown'} family: {name}")
        self.name = name
        self.retired = retired


def parse_family(value: FamilyName | str) -> FamilyName:
    if isinstance(value, FamilyName):
        return value
    text = str(value).strip().upper().replace("_", "-")
    try:
        return FamilyName(text)
    except ValueError:
        raise UnknownFamily(str(value)) from None


class ValidationFailure(ValueError):
    """Intake record missing or carrying invalid quality fields."""

    def __init__(self, missing_fields: list[str], invalid_fields: list[str] | None = None) -> None:
        self.missing_fields = list(missing_fields)
        self.invalid_fields = list(invalid_fields or [])
        parts = []
        if self.missing_fields:
            parts.append("missing " + ", ".join(self.missing_fields))
        if self.invalid_fields:
            parts.append("invalid " + ", ".join(self.invalid_fields))
        super().__init__("; ".join(parts))


class IntakeIOFailure(OSError):
    pass


class TrackerKeyImmutable(ValueError):
    pass


@dataclass
class BacklogItem:
    id: str
    title: str
    description: str
    source_ref: str
    tags: frozenset[str]
    priority: int
    owner: str
    family: FamilyName = FamilyName.KAN
    status: TicketStatus = TicketStatus.TODO
    tracker_key: str | None = None
    confidence: float | None = None
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def to_record(self) -> dict[str, Any]:
        record = dict(self.extra)
        record.update(
            id=self.id,
            title=self.title,
            description=self.description,
            source_ref=self.source_ref,
            tags=sorted(self.tags),
            priority=self.priority,
            owner=self.owner,
            family=self.family.value,
            status=self.status.value,
            tracker_key=self.tracker_key,
            confidence=self.confidence,
        )
        return record

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> BacklogItem:
        item = validate_item(record)
        if record.get("status"):
            item.status = TicketStatus(record["status"])
        item.tracker_key = record.get("tracker_key") or None
        conf = record.get("confidence")
        item.confidence = None if conf is None else float(conf)
        return item

    @property
    def source_label(self) -> str:
        """Tracker label binding a ticket back to this item."""
        return "src-" + re.sub(r"[^a-z0-9]+", "-", self.id.lower()).strip("-")


def _as_tags(value: Any) -> frozenset[str]:
    if value is None:
        return frozenset()
    if isinstance(value, str):
        parts = re.split(r"[,\s]+", value)
    else:
        parts = [str(v) for v in value]
    return frozenset(p.strip().lower() for p in parts if p and p.strip())


_KNOWN_FIELDS = set(QUALITY_FIELDS) | {"family", "status", "tracker_key", "confidence"}


def validate_item(raw: Mapping[str, Any]) -> BacklogItem:
    """Build a :class:`BacklogItem` from an intake field-map.

    Every missing quality field is reported at once; nothing is defaulted.
    """
    missing: list[str] = []
    invalid: list[str] = []
    for name in QUALITY_FIELDS:
        value = raw.get(name)
        if name == "tags":
            if not _as_tags(value):
                missing.append(name)
        elif value is None or (isinstance(value, str) and not value.strip()):
            missing.append(name)

    priority = raw.get("priority")
    if "priority" not in missing:
        try:
            priority = int(str(priority).strip())
        except ValueError:
            invalid.append("priority")
        else:
            if priority not in PRIORITY_RANGE:
                invalid.append("priority")
    if missing or invalid:
        raise ValidationFailure(missing, invalid)

    family = parse_family(raw.get("family") or FamilyName.KAN)
    return BacklogItem(
        id=str(raw["id"]).strip(),
        title=str(raw["title"]).strip(),
        description=str(raw["description"]).strip(),
        source_ref=str(raw["source_ref"]).strip(),
        tags=_as_tags(raw["tags"]),
        priority=priority,
        owner=str(raw["owner"]).strip(),
        family=family,
        extra={k: v for k, v in raw.items() if k not in _KNOWN_FIELDS},
    )


@dataclass(frozen=True)
class SourceFingerprint:
    document_path: str
    digest: str
    observed_at: datetime


def fingerprint(document_bytes: bytes, document_path: str = "", observed_at: datetime | None = None) -> SourceFingerprint:
    from .clock import SystemClock

    return SourceFingerprint(
        document_path=document_path,
        digest=hashlib.sha1(document_bytes).hexdigest(),
        observed_at=observed_at or SystemClock().now(),
    )


def fingerprint_file(path: str | Path, observed_at: datetime | None = None) -> SourceFingerprint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IntakeIOFailure(f"cannot read {path}: {exc}") from exc
    return fingerprint(data, str(path), observed_at)


_FIELD_LINE = re.compile(r"^\s*(?:[-*]\s+)?([A-Za-z_][A-Za-z0-9_ ]*?)\s*:\s*(.*)$")


def parse_records(text: str) -> list[dict[str, str]]:
    """Parse plain-text / Markdown-like line records.

    Records are blocks of ``key: value`` lines (optionally bulleted) separated
    by blank lines or ``---`` rules. Lines starting with ``#`` are headings and
    end the current record.
    """
    records: list[dict[str, str]] = []
    current: dict[str, str] = {}

    def flush() -> None:
        nonlocal current
        if current:
            records.append(current)
        current = {}

    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped == "---" or stripped.startswith("#"):
            flush()
            continue
        m = _FIELD_LINE.match(line)
        if m:
            key = m.group(1).strip().lower().replace(" ", "_")
            current[key] = m.group(2).strip()
        elif current:
            # continuation of the previous field
            last = next(reversed(current))
            current[last] = (current[last] + " " + stripped).strip()
    flush()
    return records


class PathOutsideStore(PermissionError):
    pass


def _safe_path(root: Path, name: str) -> Path:
    target = root / name
    if target.is_symlink():
        raise PathOutsideStore(f"refusing to write through symlink {target}")
    resolved = target.resolve()
    if not resolved.is_relative_to(root.resolve()):
        raise PathOutsideStore(f"{target} escapes {root}")
    return target


def atomic_write(root: Path, name: str, data: str) -> Path:
    target = _safe_path(root, name)
    tmp = target.with_name(f".{target.name}.{os.getpid()}.tmp")
    tmp.write_text(data, encoding="utf-8")
    os.replace(tmp, target)
    return target


@dataclass
class CommitInfo:
    version: int
    run_id: str
    timestamp: str
    summary: str
    file: str


class BacklogStore:
    """Versioned line-delimited JSON backlog.

    Each commit writes a full snapshot ``vNNNN.jsonl`` and appends a manifest
    line carrying run id, timestamp and change summary.
    """

    MANIFEST = "manifest.jsonl"

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._items: dict[str, BacklogItem] = {}
        self.version = 0
        self._load_latest()

    def _manifest(self) -> list[CommitInfo]:
        path = self.root / self.MANIFEST
        if not path.exists():
            return []
        return [CommitInfo(**json.loads(line)) for line in path.read_text("utf-8").splitlines() if line.strip()]

    def _load_latest(self) -> None:
        commits = self._manifest()
        if not commits:
            return
        last = commits[-1]
        self.version = last.version
        for line in (self.root / last.file).read_text("utf-8").splitlines():
            if line.strip():
                item = BacklogItem.from_record(json.loads(line))
                self._items[item.id] = item

    def history(self) -> list[CommitInfo]:
        return self._manifest()

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[BacklogItem]:
        return iter(sorted(self._items.values(), key=lambda it: it.id))

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._items

    def get(self, item_id: str) -> BacklogItem | None:
        return self._items.get(item_id)

    def by_tracker_key(self, key: str) -> BacklogItem | None:
        for item in self._items.values():
            if item.tracker_key == key:
                return item
        return None

    def add(self, item: BacklogItem) -> None:
        if item.id in self._items:
            raise ValueError(f"duplicate backlog id {item.id}")
        self._items[item.id] = item

    def upsert(self, item: BacklogItem) -> bool:
        """Insert or refresh content fields; returns True for a new item."""
        existing = self._items.get(item.id)
        if existing is None:
            self._items[item.id] = item
            return True
        existing.title = item.title
        existing.description = item.description
        existing.source_ref = item.source_ref
        existing.tags = item.tags
        existing.priority = item.priority
        existing.owner = item.owner
        existing.family = item.family
        existing.extra.update(item.extra)
        return False

    def assign_tracker_key(self, item_id: str, key: str) -> None:
        item = self._items[item_id]
        if item.tracker_key is not None and item.tracker_key != key:
            raise TrackerKeyImmutable(f"{item_id} already bound to {item.tracker_key}")
        item.tracker_key = key

    def dumps(self) -> str:
        return "".join(json.dumps(item.to_record(), sort_keys=True) + "\n" for item in self)

    def commit(self, run_id: str, now: datetime, summary: str) -> CommitInfo:
        self.cleanup_stale()
        self.version += 1
        name = f"v{self.version:04d}.jsonl"
        atomic_write(self.root, name, self.dumps())
        info = CommitInfo(self.version, run_id, format_ts(now), summary, name)
        manifest = _safe_path(self.root, self.MANIFEST)
        with manifest.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(info.__dict__, sort_keys=True) + "\n")
        return info

    def cleanup_stale(self) -> list[Path]:
        removed = []
        for tmp in self.root.glob(".*.tmp"):
            tmp.unlink(missing_ok=True)
            removed.append(tmp)
        return removed


class FingerprintIndex:
    """Last-seen SHA-1 per source document, persisted as JSON."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._digests: dict[str, dict[str, str]] = {}
        if self.path.exists():
            self._digests = json.loads(self.path.read_text("utf-8"))

    def is_dirty(self, fp: SourceFingerprint) -> bool:
        seen = self._digests.get(fp.document_path)
        return seen is None or seen["digest"] != fp.digest

    def record(self, fp: SourceFingerprint) -> None:
        self._digests[fp.document_path] = {"digest": fp.digest, "observed_at": format_ts(fp.observed_at)}

    def observed_at(self, path: str) -> datetime | None:
        seen = self._digests.get(path)
        return parse_ts(seen["observed_at"]) if seen else None

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write(self.path.parent, self.path.name, json.dumps(self._digests, indent=2, sort_keys=True))


@dataclass
class IntakeResult:
    new_items: list[BacklogItem] = field(default_factory=list)
    updated_items: list[BacklogItem] = field(default_factory=list)
    rejected: list[tuple[str, ValidationFailure]] = field(default_factory=list)
    skipped_documents: list[str] = field(default_factory=list)
    fingerprints: list[SourceFingerprint] = field(default_factory=list)


def intake_documents(
    paths: Iterable[str | Path],
    store: BacklogStore,
    index: FingerprintIndex,
    now: datetime,
) -> IntakeResult:
    """Idempotent intake: unchanged documents are skipped by fingerprint."""
    result = IntakeResult()
    for path in sorted(str(p) for p in paths):
        fp = fingerprint_file(path, observed_at=now)
        result.fingerprints.append(fp)
        if not index.is_dirty(fp):
            result.skipped_documents.append(path)
            continue
        text = Path(path).read_bytes().decode("utf-8")
        for n, raw in enumerate(parse_records(text)):
            try:
                item = validate_item(raw)
            except ValidationFailure as exc:
                result.rejected.append((f"{path}#{n}", exc))
                logger.warning("intake rejected %s#%d: %s", path, n, exc)
                continue
            if store.upsert(item):
                result.new_items.append(item)
            else:
                result.updated_items.append(store.get(item.id))
        index.record(fp)
    return result


def reconcile_statuses(store: BacklogStore, tracker_status: Mapping[str, TicketStatus]) -> list[str]:
    """Pull tracker status into the canonical backlog. Returns change lines."""
    changes = []
    for item in store:
        if item.tracker_key is None:
            continue
        status = tracker_status.get(item.tracker_key)
        if status is not None and status is not item.status:
            changes.append(f"{item.id} {item.status.value}->{status.value}")
            item.status = status
    return changes
