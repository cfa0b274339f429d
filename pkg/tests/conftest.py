import numpy as np
import pytest

from veilvec.corpus import Corpus

ACCEPTANCE_LINES = []


def corpus_from_arrays(vectors, labels, speakers=None, posteriors=None) -> Corpus:
    """Small helper: wrap raw arrays into a corpus with generated ids."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    n = vectors.shape[0]
    labels = np.asarray(labels)
    if speakers is None:
        speakers = [f"spk{i}" for i in range(n)]
    return Corpus(vectors.shape[1], [f"seg{i:04d}" for i in range(n)],
                  list(speakers), labels, vectors, posteriors)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
