import time

import pytest

_ACCEPTANCE_LINES = []


class CriterionRecorder:
    """Times one acceptance criterion and records its PASS/FAIL line."""

    def __init__(self, number, title, limit_s=None):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.start = time.perf_counter()

    def finish(self, ok, detail):
        elapsed = time.perf_counter() - self.start
        in_time = self.limit_s is None or elapsed < self.limit_s
        status = "PASS" if ok and in_time else "FAIL"
        limit = f" (limit {self.limit_s:.0f} s)" if self.limit_s else ""
        line = f"{status} #{self.number} {self.title}: {detail}; {elapsed:.1f} s{limit}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
        assert in_time, line


@pytest.fixture
def criterion():
    return CriterionRecorder


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
