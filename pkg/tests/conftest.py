import numpy as np
import pytest
import torch

from worldvol.numerics import set_deterministic


def pytest_configure(config):
    set_deterministic()
    torch.set_default_dtype(torch.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    """Collect outcomes of the acceptance tests, keyed by criterion label (``test_a3_...`` -> A3)."""
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_a") or "test_acceptance" not in report.nodeid:
        return
    label = name.split("_")[1].upper()
    if report.when == "call" or report.outcome != "passed":
        ok = report.outcome == "passed"
        _CRITERIA.setdefault(label, []).append((name, ok))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_CRITERIA, key=lambda s: int(s[1:])):
        results = _CRITERIA[label]
        status = "PASS" if all(ok for _, ok in results) else "FAIL"
        names = ", ".join(n for n, _ in results)
        terminalreporter.write_line(f"{label} {status}  ({names})")
