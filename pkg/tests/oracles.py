"""Independent reference implementations used as test oracles.

Written from the algorithm definitions, sharing no code with the package.
"""

from __future__ import annotations

import math
from functools import lru_cache


def longest_common_block(a: str, b: str) -> tuple[int, int, int]:
    """Brute force: longest block, earliest in ``a`` then earliest in ``b``."""
    best = (0, 0, 0)
    for i in range(len(a)):
        for j in range(len(b)):
            k = 0
            while i + k < len(a) and j + k < len(b) and a[i + k] == b[j + k]:
                k += 1
            if k > best[2]:
                best = (i, j, k)
    return best


def matching_characters(a: str, b: str) -> int:
    i, j, k = longest_common_block(a, b)
    if k == 0:
        return 0
    return k + matching_characters(a[:i], b[:j]) + matching_characters(a[i + k:], b[j + k:])


def ratcliff_obershelp(a: str, b: str) -> float:
    """Ratio of the lexicographically ordered pair (the raw ratio is order-dependent)."""
    a, b = min(a, b), max(a, b)
    total = len(a) + len(b)
    if total == 0:
        return 1.0
    return 2.0 * matching_characters(a, b) / total


def jaccard_tokens(a: str, b: str) -> float:
    sa, sb = set(a.lower().split()), set(b.lower().split())
    if not sa and not sb:
        return 0.0
    return len(sa.intersection(sb)) / len(sa.union(sb))


def weighted(a: str, b: str) -> float:
    na, nb = " ".join(a.lower().split()), " ".join(b.lower().split())
    return 0.6 * ratcliff_obershelp(na, nb) + 0.4 * jaccard_tokens(na, nb)


def edit_distance(a: str, b: str) -> int:
    @lru_cache(maxsize=None)
    def d(i: int, j: int) -> int:
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return d(len(a), len(b))


def tier_name(s: float) -> str:
    if s >= 0.83:
        return "Autonomous"
    if s >= 0.50:
        return "HumanReview"
    return "HaltReingest"


def cascade(item, rows):
    """All-pairs brute force of the four tiers over plain dict rows.

    Rows are dicts with id, title, tags (set) and tracker_key.
    """
    tagged = [(len(item["tags"] & r["tags"]), r["id"]) for r in rows if item["tags"] & r["tags"]]
    if tagged:
        return min(tagged, key=lambda t: (-t[0], t[1]))[1], "ExactTag"
    keyed = sorted(r["id"] for r in rows if item["tracker_key"] and r["tracker_key"] == item["tracker_key"])
    if keyed:
        return keyed[0], "KeyMatch"
    scored = sorted(((weighted(item["title"], r["title"]), r["id"]) for r in rows), key=lambda t: (-t[0], t[1]))
    if scored and scored[0][0] >= 0.50:
        return scored[0][1], "WeightedSimilarity"
    def lev_sim(x, y):
        x, y = " ".join(x.lower().split()), " ".join(y.lower().split())
        m = max(len(x), len(y))
        return 0.0 if m == 0 else 1 - edit_distance(x, y) / m
    fuzzy = sorted(((lev_sim(item["title"], r["title"]), r["id"]) for r in rows), key=lambda t: (-t[0], t[1]))
    if fuzzy and fuzzy[0][0] >= 0.83:
        return fuzzy[0][1], "FuzzyLevenshtein"
    return None, "NoMatch"


# Hand-computed TF-IDF table for the corpus
#   d0 "lock file stale", d1 "lock file ttl", d2 "stale pid"
# df: lock 2, file 2, stale 2, ttl 1, pid 1; idf = ln(3/df)
#   ln(3/2) = 0.405465, ln 3 = 1.098612
# d0 = (lock .405465, file .405465, stale .405465)       |d0| = 0.702286
# d1 = (lock .405465, file .405465, ttl 1.098612)        |d1| = 1.239255
# d2 = (stale .405465, pid 1.098612)                     |d2| = 1.171047
# d0.d1 = 2 * 0.164402 = 0.328804 -> cos 0.377800
# d0.d2 = 0.164402                -> cos 0.199903
# d1.d2 = 0                       -> cos 0
TFIDF_CORPUS = ["lock file stale", "lock file ttl", "stale pid"]
TFIDF_TABLE = {(0, 1): 0.377800, (0, 2): 0.199903, (1, 2): 0.0}


# Exact binomial lower bound by a different route: the binomial tail sum.
def binom_tail_ge(k: int, n: int, p: float) -> float:
    return sum(math.comb(n, i) * p**i * (1 - p) ** (n - i) for i in range(k, n + 1))


def cp_lower_by_tail(k: int, n: int, alpha: float = 0.05) -> float:
    """Solve P(X >= k | p) = alpha/2 for p by bisection."""
    if k == 0:
        return 0.0
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if binom_tail_ge(k, n, mid) < alpha / 2:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def cp_upper_by_tail(k: int, n: int, alpha: float = 0.05) -> float:
    """Solve P(X <= k | p) = alpha/2 for p by bisection."""
    if k == n:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if 1 - binom_tail_ge(k + 1, n, mid) > alpha / 2:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2
