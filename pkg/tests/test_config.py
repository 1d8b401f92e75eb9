from __future__ import annotations

import json
from datetime import timedelta

import pytest

from closedloop.config import ConfigError, load_config
from closedloop.fsm import LaneId


def test_defaults():
    cfg = load_config()
    assert cfg.project == "KAN"
    assert cfg.lane(LaneId.LANE4).max_workers == 3
    assert cfg.lane(LaneId.LANE4).time_budget(deep=True).budget == timedelta(minutes=120)
    assert cfg.drain_batch == 20 and cfg.breaker_threshold == 3
    assert cfg.families.is_authorized("AUTO-SEC")


def test_short_budget_scales_checkpoints():
    cfg = load_config(overrides={"lanes": {"Lane2": {"budget_minutes": 12}}})
    tb = cfg.lane(LaneId.LANE2).time_budget()
    assert (tb.checkpoint_at, tb.extended_checkpoint) == (timedelta(minutes=3), timedelta(minutes=6))


@pytest.mark.parametrize("override", [
    {"lanes": {"Lane4": {"max_workers": 0}}},
    {"thresholds": {"autonomous": 0.4}},
    {"autonomy_authorized": ["CERTREQ"]},
    {"project": "kan"},
    {"dependency_audit": {"rate": 2}},
    {"lanes": {"Lane9": {}}},
])
def test_invalid_overrides(override):
    with pytest.raises(ConfigError):
        load_config(overrides=override)


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "project": \n}')
    with pytest.raises(ConfigError, match=":3:"):
        load_config(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"drain_batch": 5}))
    assert load_config(good).drain_batch == 5
