import sys

import numpy as np
import pytest

from harc import prepared, synthetic
from harc import train as TR
from harc.model import ModelConfig, head, init_store, item_latents, rating_loss, ranking_loss, user_latents
from harc.numerics.params import make_rng

# small enough that a training epoch takes well under a second
SMALL = dict(
    d_item=16, d_user=16, d_rating=8, d_attn=8, filters_per_size=8, d_doc=16, d_latent=16,
    mlp_layers=(32, 16, 1), history_len=12, batch_size=64,
)

TINY = dict(
    n_users=7, n_items=9, vocab_rows=12, d_item=5, d_user=4, d_rating=3, d_attn=4, word_dim=3,
    window_sizes=(2, 3), filters_per_size=4, d_doc=4, d_latent=5, mlp_layers=(6, 4, 1),
    history_len=5, doc_len=8,
)


def tiny_config(**changes) -> ModelConfig:
    return ModelConfig(**{**TINY, **changes})


def random_sequences(rng, n_ids, batch, h, min_len=0):
    lengths = rng.integers(min_len, h + 1, size=batch)
    mask = (np.arange(h)[None] < lengths[:, None]).astype(np.uint8)
    ids = np.where(mask, rng.integers(0, n_ids, size=(batch, h)), -1)
    ratings = np.where(mask, rng.integers(1, 6, size=(batch, h)), 0)
    return ids, ratings, mask


def random_documents(rng, vocab_rows, batch, rho):
    lengths = rng.integers(0, rho + 1, size=batch)
    tokens = rng.integers(2, vocab_rows, size=(batch, rho))
    tokens = np.where(np.arange(rho)[None] < lengths[:, None], tokens, 0)
    return tokens, lengths


def random_inputs(seed, cfg, batch=4):
    rng = make_rng(seed, 99)
    hist = random_sequences(rng, cfg.n_items, batch, cfg.history_len)
    prof = random_sequences(rng, cfg.n_users, batch, cfg.history_len)
    docs = random_documents(rng, cfg.vocab_rows, batch, cfg.doc_len)
    if cfg.task == "rating":
        y = rng.integers(1, 6, size=batch).astype(np.float64)
    else:
        y = rng.integers(0, 2, size=batch).astype(np.float64)
    return (hist, prof, docs), y


def random_store(cfg, seed, scale=0.5):
    """A float64 store at a generic point: every weight and bias drawn normal.

    Zero biases put many ReLUs exactly on their kink, which finite
    differences cannot handle, so the checks run away from initialisation.
    """
    store = init_store(cfg, seed, dtype=np.float64)
    rng = make_rng(seed, 0xC4EC)
    for name, p in store.items():
        p.value[...] = rng.normal(0.0, scale, size=p.value.shape)
    if "doc.word_emb" in store:
        store["doc.word_emb"].value[0] = 0
    return store


def full_graph(cfg):
    def graph(store, inputs, y):
        hist, prof, docs = inputs
        u = user_latents(store, cfg, *hist)
        i = item_latents(store, cfg, *prof, *docs)
        pred = head(store, cfg, u, i)
        return rating_loss(pred, y) if cfg.task == "rating" else ranking_loss(pred, y)

    return graph


@pytest.fixture(scope="session")
def raw_files(tmp_path_factory):
    syn = synthetic.generate(n_users=40, n_items=40, n_topics=4, per_user=10, doc_words=16, dim=12, seed=3)
    return synthetic.write_dataset(syn, tmp_path_factory.mktemp("raw"))


def _prepare(paths, task, **kw):
    return prepared.prepare(
        paths["ratings"], paths["docs"], paths["stopwords"], paths["wordvecs"], task=task, seed=0, rho=24, **kw
    )


@pytest.fixture(scope="session")
def rating_data(raw_files):
    return _prepare(raw_files, "rating")


@pytest.fixture(scope="session")
def ranking_data(raw_files):
    return _prepare(raw_files, "ranking", n_negatives=20)


@pytest.fixture(scope="session")
def trained_rating(rating_data):
    cfg = TR.config_for(rating_data, **SMALL, lr=0.005)
    report, store = TR.train(cfg, rating_data, seed=0, max_epochs=4, patience=None)
    return cfg, store, report


@pytest.fixture(scope="session")
def trained_ranking(ranking_data):
    cfg = TR.config_for(ranking_data, **SMALL, lr=0.005)
    report, store = TR.train(cfg, ranking_data, seed=0, max_epochs=3, patience=None)
    return cfg, store, report


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
