import pytest

from cogscreen.concepts import compile_lexicon
from cogscreen.corpus import GenConfig, generate_synthetic_corpus
from cogscreen.preprocess import PreprocessConfig, preprocess_corpus


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(GenConfig(n_patients=60), seed=13)


@pytest.fixture(scope="session")
def small_clean(small_corpus):
    return preprocess_corpus(small_corpus, PreprocessConfig())


@pytest.fixture(scope="session")
def lexicon():
    return compile_lexicon()
