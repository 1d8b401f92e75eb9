from __future__ import annotations

from datetime import datetime, timezone

import pytest
from hypothesis import settings

from closedloop.clock import VirtualClock

settings.register_profile("ci", deadline=None, max_examples=100)
settings.load_profile("ci")

T0 = datetime(2026, 3, 2, 8, 0, tzinfo=timezone.utc)


@pytest.fixture
def clock() -> VirtualClock:
    return VirtualClock(T0)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
