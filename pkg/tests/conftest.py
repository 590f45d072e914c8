import numpy as np
import pytest

from fava.data import Corpus, CorpusSpec, generate_corpus

TINY = {"pretrain": 48, "train": 48, "dev": 8, "test": 8}


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(CorpusSpec(num_utterances=TINY, babble_k=6), root)
    return Corpus(root)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records a PASS/FAIL line and asserts ``ok``."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def report(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        results[n] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, 13):
        terminalreporter.write_line(results.get(n, f"---- criterion {n}: not run"))
