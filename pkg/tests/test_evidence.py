from __future__ import annotations

import json
import random
import time
from datetime import timedelta

import pytest
from hypothesis import given, strategies as st
from scipy import stats

from closedloop.evidence import (
    GENESIS_HASH,
    AppendRefused,
    EvidenceChain,
    TerminalStatus,
    beta_quantile,
    classify_run,
    clopper_pearson,
    regularized_beta,
    summarize,
    validate_chain,
)
from closedloop.fsm import LaneId
from closedloop.matcher import DomainError

from . import oracles
from .conftest import T0


def build(path, n):
    chain = EvidenceChain(path)
    for i in range(n):
        chain.append(f"run-{i}", LaneId.parse(i % 7 + 1), T0 + timedelta(minutes=i),
                     [f"in{i}"], [f"out{i}"], i % 3, TerminalStatus.CLEAN if i % 4 else TerminalStatus.DEGRADED)
    return chain


def rewrite(path, index, mutate):
    lines = path.read_text().splitlines()
    rec = json.loads(lines[index])
    mutate(rec)
    lines[index] = json.dumps(rec, sort_keys=True)
    path.write_text("\n".join(lines) + "\n")


def test_genesis_and_linkage(tmp_path):
    chain = EvidenceChain(tmp_path / "c.jsonl")
    a = chain.append("r0", LaneId.LANE1, T0)
    b = chain.append("r1", LaneId.LANE2, T0)
    assert (a.seq, a.prev_hash) == (0, GENESIS_HASH)
    assert b.prev_hash == a.this_hash
    assert b.permalink == "r1/1"


def test_append_refused_after_edit(tmp_path):
    chain = build(tmp_path / "c.jsonl", 5)
    rewrite(chain.path, 3, lambda r: r.update(run_id="forged"))
    with pytest.raises(AppendRefused) as exc:
        EvidenceChain(chain.path).append("r", LaneId.LANE1, T0)
    assert exc.value.first_bad_index == 3
    # the same instance notices the file changed under it
    with pytest.raises(AppendRefused):
        chain.append("r", LaneId.LANE1, T0)


def test_untouched_and_bitflip(tmp_path):
    chain = build(tmp_path / "c.jsonl", 100)
    assert validate_chain(chain.path).valid
    rewrite(chain.path, 7, lambda r: r.update(exception_count=r["exception_count"] ^ 1))
    res = validate_chain(chain.path)
    assert res.first_bad_index == 7 and str(res).startswith("Broken(7)")


def test_truncation_reports_tip_mismatch(tmp_path):
    chain = build(tmp_path / "c.jsonl", 10)
    lines = chain.path.read_text().splitlines()
    chain.path.write_text("\n".join(lines[:-1]) + "\n")
    res = validate_chain(chain.path)
    assert res.valid and res.length == 9
    assert res.tip_mismatch and res.tip_length == 10


def _mutations():
    def change(value):
        if isinstance(value, bool) or value is None:
            return "x"
        if isinstance(value, int):
            return value + 1
        if isinstance(value, list):
            return value + ["extra"]
        return value + "~" if value else "x"
    return change


def test_random_single_field_mutations_detected(tmp_path):
    base = build(tmp_path / "base.jsonl", 100).path.read_text()
    rng = random.Random(5)
    change = _mutations()
    for trial in range(200):
        path = tmp_path / f"m{trial}.jsonl"
        path.write_text(base)
        idx = rng.randrange(100)
        field = rng.choice(sorted(json.loads(base.splitlines()[idx])))
        rewrite(path, idx, lambda r: r.update({field: change(r[field])}))
        res = validate_chain(path)
        assert not res.valid and res.first_bad_index <= idx


@pytest.mark.parametrize("k,lower", [(152, 0.976), (82, 0.956), (29, 0.881), (41, 0.914)])
def test_clopper_pearson_reported_bounds(k, lower):
    est = clopper_pearson(k, k)
    assert est.lower == pytest.approx(lower, abs=1e-3)
    assert est.upper == 1.0


def test_clopper_pearson_zero_of_one():
    est = clopper_pearson(0, 1)
    assert est.lower == 0.0
    assert est.upper == pytest.approx(0.975, abs=1e-3)


def test_clopper_pearson_against_two_oracles():
    for k, n in [(0, 5), (3, 10), (7, 7), (12, 40), (50, 51), (1, 152), (140, 152)]:
        est = clopper_pearson(k, n)
        lo = 0.0 if k == 0 else stats.beta.ppf(0.025, k, n - k + 1)
        hi = 1.0 if k == n else stats.beta.ppf(0.975, k + 1, n - k)
        assert est.lower == pytest.approx(lo, abs=1e-9)
        assert est.upper == pytest.approx(hi, abs=1e-9)
        assert est.lower == pytest.approx(oracles.cp_lower_by_tail(k, n), abs=1e-9)
        assert est.upper == pytest.approx(oracles.cp_upper_by_tail(k, n), abs=1e-9)


@given(st.floats(0.001, 0.999), st.floats(0.5, 200), st.floats(0.5, 200))
def test_regularized_beta_matches_scipy(x, a, b):
    assert regularized_beta(x, a, b) == pytest.approx(stats.beta.cdf(x, a, b), abs=1e-9)


def test_beta_quantile_inverts_cdf():
    for p in (0.025, 0.5, 0.975):
        q = beta_quantile(p, 4, 9)
        assert regularized_beta(q, 4, 9) == pytest.approx(p, abs=1e-10)


@given(st.integers(1, 200), st.data())
def test_clopper_pearson_monotone(n, data):
    k = data.draw(st.integers(0, n - 1))
    assert clopper_pearson(k, n).lower <= clopper_pearson(k + 1, n).lower
    wide, narrow = clopper_pearson(k, n, 0.01), clopper_pearson(k, n, 0.10)
    assert wide.lower <= narrow.lower and wide.upper >= narrow.upper


@pytest.mark.parametrize("k,n,alpha", [(5, 3, 0.05), (-1, 3, 0.05), (1, 0, 0.05), (1, 2, 1.5)])
def test_clopper_pearson_domain(k, n, alpha):
    with pytest.raises(DomainError):
        clopper_pearson(k, n, alpha)


def test_clopper_pearson_fast():
    start = time.perf_counter()
    for k in (152, 82, 29, 41):
        clopper_pearson(k, k)
    assert time.perf_counter() - start < 1.0


def test_classification():
    assert classify_run(True, 0) is TerminalStatus.CLEAN
    assert classify_run(True, 2) is TerminalStatus.DEGRADED
    assert classify_run(False, 0) is TerminalStatus.FAILED
    assert classify_run(False, 3) is TerminalStatus.FAILED


@given(st.integers(1, 50))
def test_alerts_on_success_never_failed(n):
    assert classify_run(True, n) is TerminalStatus.DEGRADED


def test_summary(tmp_path):
    chain = build(tmp_path / "c.jsonl", 8)
    s = summarize(chain.records())
    assert (s.runs, s.degraded, s.clean, s.failed) == (8, 2, 6, 0)
    assert s.reliability().lower == pytest.approx(clopper_pearson(8, 8).lower)
