import numpy as np
import pytest

from cftrec.corpus import GenConfig, corpus_vocab, generate_catalog, generate_interactions


@pytest.fixture(scope="session")
def small_cfg():
    return GenConfig(n_users=40, n_items=30, n_categories=3, tokens_per_item=3, history_len=3, stream_len=10, seed=5)


@pytest.fixture(scope="session")
def small_corpus(small_cfg):
    catalog = generate_catalog(small_cfg)
    data = generate_interactions(catalog, small_cfg)
    return catalog, data, corpus_vocab(catalog)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
