import os

import pytest
from hypothesis import HealthCheck, settings

from minerva.config import MinervaConfig
from minerva.dhtnet import LatencyDistribution, Network

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=1000,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def const_net():
    return Network.create(6, LatencyDistribution.constant(10.0), seed=3)


@pytest.fixture
def const_config():
    cfg = MinervaConfig()
    cfg.net.latency_kind = "constant"
    cfg.net.latency_value_ms = 10.0
    cfg.net.peers = 6
    return cfg.validate()


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
