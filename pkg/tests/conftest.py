import numpy as np
import pytest

from finealign.encoder import init_params
from finealign.synthdata import CorpusConfig, generate_corpus
from finealign.trainer import encoder_config_for


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusConfig(samples=8, seed=3))


@pytest.fixture(scope="session")
def small_model(small_corpus):
    enc = encoder_config_for(small_corpus, {"dim": 8})
    return enc, init_params(enc, 5)

