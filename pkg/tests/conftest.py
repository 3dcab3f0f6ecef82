import functools

import pytest

from diffchem.flame1d import DEFAULT_CASE, load_case

DEFAULT_NODES = DEFAULT_CASE["nodes"]


@functools.lru_cache(maxsize=None)
def h2_flame(nodes=DEFAULT_NODES):
    """Converged built-in hydrogen flame at true kinetics, solved once per session."""
    return load_case({"nodes": nodes}).solve()


@pytest.fixture(scope="session")
def h2_solution():
    return h2_flame()


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
