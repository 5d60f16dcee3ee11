import numpy as np
import pytest
from hypothesis import settings

from geomicl.data import SyntheticSpec, synth_generate

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_registry():
    """3 domains x 2 datasets x 8 classes x 12 samples, dim 16."""
    return synth_generate(SyntheticSpec(3, 2, 8, samples_per_class=12, dim=16, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Records one PASS/FAIL line per acceptance criterion, then asserts it."""
    lines = request.config.stash[_VERDICTS]

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append((number, line))
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
