import numpy as np
import pytest

from ddsolve.decomp import build_grid, partition_overlapping
from ddsolve.linear_schwarz import LinearSchwarzContext
from ddsolve.problems import assemble_poisson


def poisson_context(points, counts, layers, h=None):
    grid = build_grid(len(points), points, h or 1.0 / (points[0] + 1))
    A, f = assemble_poisson(grid)
    return LinearSchwarzContext(A, f, partition_overlapping(grid, counts, layers))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def poisson9():
    """1D Poisson, 9 unknowns, two subdomains with one overlap layer (K = {2, 5})."""
    return poisson_context([9], [2], 1, h=0.1)


@pytest.fixture(scope="session")
def poisson1d_small():
    return poisson_context([99], [5], 2)


@pytest.fixture(scope="session")
def poisson2d_small():
    return poisson_context([20, 18], [2, 3], 2)


# one line per acceptance criterion, echoed in the terminal summary
CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        CRITERIA[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
