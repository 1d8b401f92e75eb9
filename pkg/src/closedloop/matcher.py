"""Canonicalization: four-tier matching cascade and similarity scoring."""

from __future__ import annotations

import difflib
import json
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .backlog import BacklogItem

SEQUENCE_WEIGHT = 0.6
JACCARD_WEIGHT = 0.4


class DomainError(ValueError):
    pass


class ZeroVector(UserWarning):
    """A TF-IDF vector had no non-zero weight; cosine was defined as 0."""


class ConfidenceTier(Enum):
    AUTONOMOUS = "Autonomous"
    HUMAN_REVIEW = "HumanReview"
    HALT_REINGEST = "HaltReingest"


class MatchTier(Enum):
    EXACT_TAG = "ExactTag"
    KEY_MATCH = "KeyMatch"
    WEIGHTED_SIMILARITY = "WeightedSimilarity"
    FUZZY_LEVENSHTEIN = "FuzzyLevenshtein"
    NO_MATCH = "NoMatch"


@dataclass(frozen=True)
class Thresholds:
    autonomous: float = 0.83
    review: float = 0.50
    fuzzy: float = 0.83

    def __post_init__(self) -> None:
        if not 0.0 <= self.review <= self.autonomous <= 1.0:
            raise DomainError(f"bad thresholds {self}")


@dataclass(frozen=True)
class SimilarityScore:
    s: float
    sm: float
    jac: float
    empty: bool = False


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def tokens(text: str) -> list[str]:
    return normalize(text).split()


def sequence_ratio(a: str, b: str) -> float:
    """Ratcliff/Obershelp ratio on the lexicographically ordered pair.

    The raw algorithm depends on argument order; fixing the order makes the
    score symmetric. autojunk is off because the popularity heuristic makes
    results length-dependent.
    """
    if b < a:
        a, b = b, a
    return difflib.SequenceMatcher(None, a, b, autojunk=False).ratio()


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    sa, sb = set(a), set(b)
    union = sa | sb
    if not union:
        return 0.0
    return len(sa & sb) / len(union)


def similarity(a: str, b: str) -> SimilarityScore:
    na, nb = normalize(a), normalize(b)
    if not na and not nb:
        return SimilarityScore(0.0, 0.0, 0.0, empty=True)
    sm = sequence_ratio(na, nb)
    jac = jaccard(na.split(), nb.split())
    return SimilarityScore(SEQUENCE_WEIGHT * sm + JACCARD_WEIGHT * jac, sm, jac)


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def levenshtein_similarity(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return 1.0 - levenshtein(a, b) / longest


@dataclass
class DocumentVector:
    doc_id: str
    weights: dict[str, float] = field(default_factory=dict)

    @property
    def norm(self) -> float:
        return math.sqrt(sum(w * w for w in self.weights.values()))


def tfidf_vectors(corpus: Sequence[str], doc_ids: Sequence[str] | None = None) -> list[DocumentVector]:
    """Raw-count tf times ``ln(N / df)`` idf over the given corpus."""
    if not corpus:
        raise DomainError("empty corpus")
    ids = list(doc_ids) if doc_ids is not None else [str(i) for i in range(len(corpus))]
    counts = [Counter(tokens(doc)) for doc in corpus]
    df: Counter[str] = Counter()
    for c in counts:
        df.update(c.keys())
    n = len(corpus)
    idf = {term: math.log(n / d) for term, d in df.items()}
    return [
        DocumentVector(doc_id, {t: tf * idf[t] for t, tf in c.items() if tf * idf[t] > 0})
        for doc_id, c in zip(ids, counts)
    ]


def cosine(u: DocumentVector, v: DocumentVector) -> float:
    nu, nv = u.norm, v.norm
    if nu == 0 or nv == 0:
        warnings.warn(f"zero TF-IDF vector in ({u.doc_id}, {v.doc_id})", ZeroVector, stacklevel=2)
        return 0.0
    small, large = (u.weights, v.weights) if len(u.weights) <= len(v.weights) else (v.weights, u.weights)
    dot = sum(w * large.get(t, 0.0) for t, w in small.items())
    return min(1.0, dot / (nu * nv))


def tfidf_cosine(corpus: Sequence[str], i: int, j: int) -> float:
    vectors = tfidf_vectors(corpus)
    return cosine(vectors[i], vectors[j])


def tier(s: float, thresholds: Thresholds = Thresholds()) -> ConfidenceTier:
    if not 0.0 <= s <= 1.0 or math.isnan(s):
        raise DomainError(f"similarity {s} outside [0, 1]")
    if s >= thresholds.autonomous:
        return ConfidenceTier.AUTONOMOUS
    if s >= thresholds.review:
        return ConfidenceTier.HUMAN_REVIEW
    return ConfidenceTier.HALT_REINGEST


@dataclass(frozen=True)
class MatchResult:
    matched_item: BacklogItem | None
    tier_used: MatchTier
    confidence_tier: ConfidenceTier
    score: SimilarityScore | None = None
    fuzzy_similarity: float | None = None

    @property
    def effective_score(self) -> float:
        if self.tier_used in (MatchTier.EXACT_TAG, MatchTier.KEY_MATCH):
            return 1.0
        return self.score.s if self.score else 0.0


class MatchIndex:
    """Lookup tables over a backlog snapshot for the cascade."""

    def __init__(self, backlog: Iterable[BacklogItem]) -> None:
        self.items = sorted(backlog, key=lambda it: it.id)
        self.by_tag: dict[str, list[BacklogItem]] = defaultdict(list)
        self.by_key: dict[str, list[BacklogItem]] = defaultdict(list)
        self.titles: dict[str, str] = {}
        for item in self.items:
            for tag in item.tags:
                self.by_tag[tag].append(item)
            if item.tracker_key:
                self.by_key[item.tracker_key].append(item)
            self.titles[item.id] = normalize(item.title)


def match_item(
    item: BacklogItem,
    backlog: Iterable[BacklogItem] | MatchIndex,
    thresholds: Thresholds = Thresholds(),
) -> MatchResult:
    """Run the cascade: exact tag, tracker key, weighted similarity, fuzzy edit distance."""
    index = backlog if isinstance(backlog, MatchIndex) else MatchIndex(backlog)

    shared: Counter[str] = Counter()
    rows: dict[str, BacklogItem] = {}
    for tag in item.tags:
        for row in index.by_tag.get(tag, ()):
            shared[row.id] += 1
            rows[row.id] = row
    if shared:
        best = min(shared, key=lambda rid: (-shared[rid], rid))
        return MatchResult(rows[best], MatchTier.EXACT_TAG, ConfidenceTier.AUTONOMOUS)

    if item.tracker_key and index.by_key.get(item.tracker_key):
        row = min(index.by_key[item.tracker_key], key=lambda r: r.id)
        return MatchResult(row, MatchTier.KEY_MATCH, ConfidenceTier.AUTONOMOUS)

    # every row is scored: a token-disjoint title can still clear the review
    # threshold on the character component alone
    title = normalize(item.title)
    best_row, best_score = None, None
    for row in index.items:
        sc = similarity(title, index.titles[row.id])
        if best_score is None or sc.s > best_score.s:
            best_row, best_score = row, sc
    if best_row is not None and best_score.s >= thresholds.review:
        return MatchResult(best_row, MatchTier.WEIGHTED_SIMILARITY, tier(best_score.s, thresholds), best_score)

    best_row, best_lev = None, -1.0
    for row in index.items:
        lev = levenshtein_similarity(title, index.titles[row.id])
        if lev > best_lev:
            best_row, best_lev = row, lev
    if best_row is not None and best_lev >= thresholds.fuzzy:
        sc = similarity(title, index.titles[best_row.id])
        return MatchResult(best_row, MatchTier.FUZZY_LEVENSHTEIN, tier(sc.s, thresholds), sc, best_lev)

    return MatchResult(None, MatchTier.NO_MATCH, ConfidenceTier.HALT_REINGEST)


@dataclass
class FixQueueEntry:
    ticket_key: str
    priority_score: float
    priority_type: str
    relevant_paths: list[str]
    area: str
    confidence: float

    @classmethod
    def from_record(cls, record: dict) -> FixQueueEntry:
        return cls(
            ticket_key=record["ticket_key"],
            priority_score=float(record["priority_score"]),
            priority_type=str(record["priority_type"]),
            relevant_paths=list(record.get("relevant_paths", [])),
            area=str(record.get("area", "")),
            confidence=float(record["confidence"]),
        )


def write_fix_queue(path: str | Path, entries: Iterable[FixQueueEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in entries)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(body, encoding="utf-8")
    tmp.replace(path)


def read_fix_queue(path: str | Path) -> list[FixQueueEntry]:
    """Entries ordered by ``priority_score`` descending, ties by ticket key."""
    path = Path(path)
    if not path.exists():
        return []
    entries = [
        FixQueueEntry.from_record(json.loads(line))
        for line in path.read_text("utf-8").splitlines()
        if line.strip()
    ]
    return sorted(entries, key=lambda e: (-e.priority_score, e.ticket_key))
