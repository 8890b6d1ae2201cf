import numpy as np
import pytest

from qnetld.model import load_fixture

DESK = ("J1", "J1s", "J2", "J2u", "P2", "P2u")


@pytest.fixture(scope="session")
def fx():
    """All shipped fixture specs by name."""
    return {name: load_fixture(name) for name in ("J1", "J1s", "J2", "J2u", "J3", "P2", "P2u")}


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::" in getattr(rep, "nodeid", "") and rep.when == "call":
                lines.append((rep.nodeid.split("::")[-1], outcome))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, outcome in sorted(lines):
            terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
