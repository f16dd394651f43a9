import pytest

from heisenflag.fields import GridSpec
from heisenflag.spectral import SpectralCalculus

ACCEPTANCE_LINES: dict = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    """Store one acceptance result line and echo it to stdout."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def spec():
    return GridSpec()


@pytest.fixture(scope="session")
def small_spec():
    return GridSpec(Z=1.0, T=2.0, n_z=8, n_t=16)


@pytest.fixture(scope="session")
def calc(spec):
    return SpectralCalculus.build(spec)


@pytest.fixture(scope="session")
def small_calc(small_spec):
    return SpectralCalculus.build(small_spec)
