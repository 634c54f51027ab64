import numpy as np
import pytest

from mone.calibration import run_calibration
from mone.corpus import markov_corpus
from mone.model import ModelConfig, init_model

# seeded desk-scale fixture shared by the acceptance checks
MAIN_CONFIG = ModelConfig(vocab_size=256, d_model=64, n_layers=4, n_experts=16, top_k=4, d_expert=128, seed=42)
MAIN_CORPUS_SEED = 1
CALIB_SIZE = 100


@pytest.fixture(scope="session")
def main_model():
    return init_model(MAIN_CONFIG)


@pytest.fixture(scope="session")
def main_corpus():
    return markov_corpus(MAIN_CONFIG.vocab_size, 1000, 128, MAIN_CORPUS_SEED)


@pytest.fixture(scope="session")
def calib_corpus(main_corpus):
    return main_corpus.head(CALIB_SIZE)


@pytest.fixture(scope="session")
def eval_corpus(main_corpus):
    return main_corpus.slice(968, 1000)


@pytest.fixture(scope="session")
def main_calib(main_model, calib_corpus):
    return run_calibration(main_model, calib_corpus)


@pytest.fixture
def small_config():
    return ModelConfig(vocab_size=32, d_model=8, n_layers=2, n_experts=8, top_k=2, d_expert=16, seed=3)


@pytest.fixture
def small_model(small_config):
    return init_model(small_config)


@pytest.fixture
def small_corpus(small_config):
    return markov_corpus(small_config.vocab_size, 12, 16, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per criterion in the terminal summary
ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Set ``criterion.number`` and ``criterion.detail``; the verdict is logged at teardown."""
    class Record:
        number = 0
        detail = ""

    rec = Record()
    yield rec
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    line = f"criterion {rec.number:2d}: {'PASS' if ok else 'FAIL'}  {rec.detail}"
    print(line)
    request.config.stash[ACCEPTANCE_LINES].append((rec.number, line))
