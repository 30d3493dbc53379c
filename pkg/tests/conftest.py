from __future__ import annotations

from threadpoolctl import threadpool_limits

# single-threaded BLAS keeps timings honest and results bitwise reproducible
threadpool_limits(1)

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
