import numpy as np
import pytest

from micron.cohort import GeneratorConfig, Vocabulary, generate_cohort, split_cohort

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session")
def default_cohort():
    return generate_cohort(GeneratorConfig(), 7)


@pytest.fixture(scope="session")
def default_splits(default_cohort):
    return split_cohort(default_cohort, (0.6, 0.2, 0.2), seed=0)


@pytest.fixture
def tiny_vocab():
    return Vocabulary(10, 10, 6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
