from __future__ import annotations

import socket
import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).resolve().parent
ROOT = TESTS.parent
FIXTURES = ROOT / "fixtures"
sys.path.insert(0, str(TESTS))


class NetworkBlocked(AssertionError):
    pass


def block_network(mp: pytest.MonkeyPatch) -> list:
    """Patch socket connects to fail loudly; returns the list that collects attempts."""
    attempts: list = []

    def guard(self, address, *a, **kw):
        attempts.append(address)
        raise NetworkBlocked(f"network access attempted: {address}")

    mp.setattr(socket.socket, "connect", guard)
    mp.setattr(socket.socket, "connect_ex", guard)
    mp.setattr(socket, "create_connection", lambda address, *a, **kw: guard(None, address))
    return attempts


@pytest.fixture
def no_network(monkeypatch):
    """Fail loudly on any outbound connection; yields the attempted addresses."""
    yield block_network(monkeypatch)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def engine_config() -> Path:
    return FIXTURES / "engine.yaml"


# -- acceptance reporting ----------------------------------------------------------------

ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; the lines are echoed at the end."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail else "")
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
