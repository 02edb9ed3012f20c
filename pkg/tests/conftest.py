import numpy as np
import pytest

from sctgan.phantom import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom(PhantomSpec(seed=3))


@pytest.fixture(scope="session")
def small_phantom():
    return generate_phantom(PhantomSpec(seed=5, dims=(24, 32, 24)))


def brute_nearest(src, dst):
    """Exhaustive nearest neighbour with smallest-index tie-break."""
    idx = np.empty(len(src), dtype=int)
    dist = np.empty(len(src))
    for i, p in enumerate(src):
        d = np.sqrt(((p - dst) ** 2).sum(-1))
        j = int(np.flatnonzero(d == d.min())[0])
        idx[i], dist[i] = j, d[j]
    return idx, dist


# one summary line per acceptance criterion, printed after the test run
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
