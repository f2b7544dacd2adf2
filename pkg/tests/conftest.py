import numpy as np
import pytest

from decaylab.train import TrainConfig, load_corpus, make_corpus


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    """A synthetic text corpus of ~150 KB, shared across the session."""
    path = tmp_path_factory.mktemp("data") / "corpus.txt"
    make_corpus(str(path), size=150_000, seed=1)
    return str(path)


@pytest.fixture(scope="session")
def corpus(corpus_path):
    return load_corpus(corpus_path, TrainConfig())


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))
