import importlib

import pytest

from passvp.harness.config import PlatformConfig
from passvp.harness.platform import build_platform


def _implementations():
    mods = [importlib.import_module("passvp._pyspeedups")]
    try:
        mods.append(importlib.import_module("passvp._speedups"))
    except ImportError:
        pass
    return mods


KERNEL_IMPLS = _implementations()


@pytest.fixture(params=KERNEL_IMPLS, ids=lambda m: m.IMPLEMENTATION)
def impl(request):
    return request.param


@pytest.fixture
def platform():
    p = build_platform(PlatformConfig())
    yield p
    p.close()


# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok, detail: str) -> None:
    verdict = {True: "PASS", False: "FAIL", None: "SKIP"}[ok if ok is None else bool(ok)]
    ACCEPTANCE_LINES[number] = f"criterion {number}: {verdict}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
