"""Hash-linked evidence chain and exact binomial reliability bounds."""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Iterable

from .clock import format_ts, parse_ts
from .fsm import LaneId
from .matcher import DomainError

GENESIS_HASH = "0" * 64
RECORD_FIELDS = (
    "seq",
    "run_id",
    "lane",
    "timestamp",
    "input_digests",
    "output_digests",
    "exception_count",
    "terminal_status",
    "prev_hash",
)


class TerminalStatus(Enum):
    CLEAN = "CLEAN"
    DEGRADED = "DEGRADED"
    FAILED = "FAILED"


def classify_run(succeeded: bool, informational_alerts: int) -> TerminalStatus:
    """DEGRADED means alerts were surfaced on a successful run, never a partial failure."""
    if not succeeded:
        return TerminalStatus.FAILED
    return TerminalStatus.DEGRADED if informational_alerts > 0 else TerminalStatus.CLEAN


def canonical_bytes(fields: dict) -> bytes:
    return json.dumps(fields, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def record_hash(fields: dict) -> str:
    body = {k: v for k, v in fields.items() if k != "this_hash"}
    return hashlib.sha256(canonical_bytes(body)).hexdigest()


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class EvidenceRecord:
    seq: int
    run_id: str
    lane: LaneId
    timestamp: datetime
    input_digests: tuple[str, ...]
    output_digests: tuple[str, ...]
    exception_count: int
    terminal_status: TerminalStatus
    prev_hash: str
    this_hash: str

    @property
    def permalink(self) -> str:
        return permalink(self.run_id, self.seq)

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "run_id": self.run_id,
            "lane": self.lane.value,
            "timestamp": format_ts(self.timestamp),
            "input_digests": list(self.input_digests),
            "output_digests": list(self.output_digests),
            "exception_count": self.exception_count,
            "terminal_status": self.terminal_status.value,
            "prev_hash": self.prev_hash,
            "this_hash": self.this_hash,
        }

    @classmethod
    def from_json(cls, raw: dict) -> EvidenceRecord:
        return cls(
            int(raw["seq"]),
            raw["run_id"],
            LaneId.parse(raw["lane"]),
            parse_ts(raw["timestamp"]),
            tuple(raw["input_digests"]),
            tuple(raw["output_digests"]),
            int(raw["exception_count"]),
            TerminalStatus(raw["terminal_status"]),
            raw["prev_hash"],
            raw["this_hash"],
        )


def permalink(run_id: str, seq: int) -> str:
    return f"{run_id}/{seq}"


@dataclass(frozen=True)
class ChainValidation:
    length: int
    first_bad_index: int | None = None
    tip_length: int | None = None
    reason: str = ""

    @property
    def valid(self) -> bool:
        return self.first_bad_index is None

    @property
    def tip_mismatch(self) -> bool:
        return self.tip_length is not None and self.tip_length != self.length

    def __str__(self) -> str:
        if self.valid:
            tail = f", tip records {self.tip_length}" if self.tip_mismatch else ""
            return f"Valid ({self.length} records{tail})"
        return f"Broken({self.first_bad_index}): {self.reason}"


def _check_line(index: int, line: str, prev_hash: str) -> str | None:
    """Returns a failure reason for one stored record, or None."""
    try:
        raw = json.loads(line)
    except json.JSONDecodeError:
        return "unparseable record"
    if not isinstance(raw, dict) or set(raw) != set(RECORD_FIELDS) | {"this_hash"}:
        return "field set differs"
    if raw["seq"] != index or type(raw["seq"]) is not int:
        return f"seq {raw['seq']!r} at position {index}"
    if raw["prev_hash"] != prev_hash:
        return "prev_hash does not link to previous record"
    if record_hash(raw) != raw["this_hash"]:
        return "this_hash does not match record contents"
    try:
        EvidenceRecord.from_json(raw)
    except (KeyError, ValueError, TypeError) as exc:
        return f"invalid field: {exc}"
    return None


def validate_lines(lines: Iterable[str]) -> ChainValidation:
    prev = GENESIS_HASH
    n = 0
    for i, line in enumerate(lines):
        reason = _check_line(i, line, prev)
        if reason:
            return ChainValidation(i, i, reason=reason)
        prev = json.loads(line)["this_hash"]
        n = i + 1
    return ChainValidation(n)


class AppendRefused(Exception):
    def __init__(self, first_bad_index: int, reason: str = "") -> None:
        super().__init__(f"chain broken at record {first_bad_index}: {reason}")
        self.first_bad_index = first_bad_index


class EvidenceChain:
    """Line-delimited chain file plus a tip sidecar recording length and head hash."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.tip_path = self.path.with_name(self.path.name + ".tip")
        self._mutex = threading.Lock()
        self._stamp: tuple | None = None
        self._tip: tuple[int, str] = (0, GENESIS_HASH)

    def _lines(self) -> list[str]:
        try:
            text = self.path.read_text("utf-8")
        except FileNotFoundError:
            return []
        return [l for l in text.split("\n") if l.strip()]

    def _file_stamp(self) -> tuple | None:
        try:
            st = os.stat(self.path)
        except FileNotFoundError:
            return None
        return (st.st_ino, st.st_size, st.st_mtime_ns)

    def _read_tip(self) -> int | None:
        try:
            return int(json.loads(self.tip_path.read_text("utf-8"))["length"])
        except (FileNotFoundError, ValueError, KeyError):
            return None

    def validate(self) -> ChainValidation:
        lines = self._lines()
        result = validate_lines(lines)
        result = ChainValidation(result.length, result.first_bad_index, self._read_tip(), result.reason)
        if result.valid:
            head = json.loads(lines[-1])["this_hash"] if lines else GENESIS_HASH
            self._tip = (result.length, head)
            self._stamp = self._file_stamp()
        return result

    def records(self) -> list[EvidenceRecord]:
        return [EvidenceRecord.from_json(json.loads(l)) for l in self._lines()]

    def __len__(self) -> int:
        return len(self._lines())

    def append(
        self,
        run_id: str,
        lane: LaneId,
        timestamp: datetime,
        input_digests: Iterable[str] = (),
        output_digests: Iterable[str] = (),
        exception_count: int = 0,
        terminal_status: TerminalStatus = TerminalStatus.CLEAN,
    ) -> EvidenceRecord:
        with self._mutex:
            if self._stamp is None or self._stamp != self._file_stamp():
                check = self.validate()
                if not check.valid:
                    raise AppendRefused(check.first_bad_index, check.reason)
            seq, prev = self._tip
            fields = {
                "seq": seq,
                "run_id": run_id,
                "lane": LaneId.parse(lane).value,
                "timestamp": format_ts(timestamp),
                "input_digests": list(input_digests),
                "output_digests": list(output_digests),
                "exception_count": int(exception_count),
                "terminal_status": TerminalStatus(terminal_status).value,
                "prev_hash": prev,
            }
            fields["this_hash"] = record_hash(fields)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(fields, sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            tmp = self.tip_path.with_name(self.tip_path.name + ".tmp")
            tmp.write_text(json.dumps({"length": seq + 1, "this_hash": fields["this_hash"]}), encoding="utf-8")
            os.replace(tmp, self.tip_path)
            self._tip = (seq + 1, fields["this_hash"])
            self._stamp = self._file_stamp()
            return EvidenceRecord.from_json(fields)


def append_record(chain: EvidenceChain, **fields) -> EvidenceRecord:
    return chain.append(**fields)


def validate_chain(chain: EvidenceChain | str | Path) -> ChainValidation:
    if not isinstance(chain, EvidenceChain):
        chain = EvidenceChain(chain)
    return chain.validate()


# exact binomial interval

_FPMIN = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
        c = 1.0 + aa / c
        c = c if abs(c) > _FPMIN else _FPMIN
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
        c = 1.0 + aa / c
        c = c if abs(c) > _FPMIN else _FPMIN
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def regularized_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise DomainError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def beta_quantile(p: float, a: float, b: float, tol: float = 1e-12) -> float:
    """Inverse of I_x(a, b) by bisection; monotone so bisection always converges."""
    if not 0.0 <= p <= 1.0:
        raise DomainError("probability outside [0, 1]")
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = (lo + hi) / 2.0
        if regularized_beta(mid, a, b) < p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


@dataclass(frozen=True)
class ReliabilityEstimate:
    k: int
    n: int
    alpha: float
    lower: float
    upper: float

    @property
    def point(self) -> float:
        return self.k / self.n

    def __str__(self) -> str:
        pct = 100 * (1 - self.alpha)
        return f"{self.k}/{self.n} = {self.point:.3f}, {pct:g}% CI [{self.lower:.3f}, {self.upper:.3f}]"


def clopper_pearson(k: int, n: int, alpha: float = 0.05) -> ReliabilityEstimate:
    if not (isinstance(k, int) and isinstance(n, int)) or n < 1 or not 0 <= k <= n:
        raise DomainError(f"need integers 0 <= k <= n, n >= 1 (got k={k}, n={n})")
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    lower = 0.0 if k == 0 else beta_quantile(alpha / 2, k, n - k + 1)
    upper = 1.0 if k == n else beta_quantile(1 - alpha / 2, k + 1, n - k)
    return ReliabilityEstimate(k, n, alpha, lower, upper)


@dataclass
class ChainSummary:
    runs: int = 0
    clean: int = 0
    degraded: int = 0
    failed: int = 0
    by_lane: dict[str, int] = field(default_factory=dict)

    @property
    def succeeded(self) -> int:
        return self.clean + self.degraded

    def reliability(self, alpha: float = 0.05) -> ReliabilityEstimate | None:
        return clopper_pearson(self.succeeded, self.runs, alpha) if self.runs else None


def summarize(records: Iterable[EvidenceRecord]) -> ChainSummary:
    s = ChainSummary()
    for r in records:
        s.runs += 1
        s.by_lane[r.lane.value] = s.by_lane.get(r.lane.value, 0) + 1
        if r.terminal_status is TerminalStatus.CLEAN:
            s.clean += 1
        elif r.terminal_status is TerminalStatus.DEGRADED:
            s.degraded += 1
        else:
            s.failed += 1
    return s


__all__ = [
    "AppendRefused",
    "ChainSummary",
    "ChainValidation",
    "EvidenceChain",
    "EvidenceRecord",
    "GENESIS_HASH",
    "ReliabilityEstimate",
    "TerminalStatus",
    "append_record",
    "beta_quantile",
    "classify_run",
    "clopper_pearson",
    "permalink",
    "regularized_beta",
    "summarize",
    "validate_chain",
]
