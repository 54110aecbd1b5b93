import numpy as np
import pytest

from stemsplit.mixgen import build_pool, save_pool
from stemsplit.synth import make_fixture_corpus

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def fixture_pool_16k(tmp_path_factory):
    """Synthetic clip pools at 16 kHz, indexed into pools.json."""
    root = make_fixture_corpus(tmp_path_factory.mktemp("fixtures16k"), sample_rate=16000, seed=0)
    pool = build_pool(root)
    save_pool(root / "pools.json", pool)
    return pool


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
