import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (passed, detail); filled by the acceptance suite
VERDICTS: dict[int, tuple[bool, str]] = {}


class Verdict:
    def __init__(self, number: int):
        self.number = number
        self.detail = "no verdict recorded (test errored before its check)"
        self.passed = False

    def record(self, passed: bool, detail: str) -> bool:
        self.passed, self.detail = bool(passed), detail
        return self.passed


@pytest.fixture
def verdict(request):
    v = Verdict(request.node.get_closest_marker("criterion").args[0])
    yield v
    VERDICTS[v.number] = (v.passed, v.detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        passed, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
