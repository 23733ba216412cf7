import numpy as np
import pytest

from absorb.data import StudyRecord, partition


def make_dataset(rows, k_missing=0):
    """rows: (n, y1, s1, y2, s2) tuples with None for unreported values."""
    studies = [StudyRecord(f"s{i}", n, y1, s1, y2, s2)
               for i, (n, y1, s1, y2, s2) in enumerate(rows)]
    return partition(studies, k_missing=k_missing)


@pytest.fixture
def small_dataset():
    rng = np.random.default_rng(3)
    rows = []
    for i in range(12):
        s1, s2 = rng.uniform(0.2, 0.8, 2)
        y1, y2 = rng.normal(0.3, 0.5), rng.normal(-0.3, 0.5)
        pat = i % 4
        if pat == 3:
            rows.append((50, y1, s1, None, None))
        elif pat == 2:
            rows.append((60, None, None, y2, s2))
        else:
            rows.append((40 + i, y1, s1, y2, s2))
    return make_dataset(rows)


ACCEPTANCE_LINES = []


def report_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
