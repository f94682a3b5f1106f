import numpy as np
import pytest

from kbvqa.embeddings import ENTITY, WORD, WORDPIECE, AlignmentMap, EmbeddingTable
from kbvqa.injector import END_TOKEN, SEPARATOR_TEXT, START_TOKEN, UNK_TOKEN


def make_table(dim, words=(), pieces=(), entities=(), cased=None, rng=None):
    """Build a table with deterministic (seeded) or supplied vectors."""
    rng = rng or np.random.default_rng(0)
    table = EmbeddingTable(dim=dim, cased=bool(entities) if cased is None else cased)
    for namespace, keys in ((WORD, words), (WORDPIECE, pieces), (ENTITY, entities)):
        for key in keys:
            if isinstance(key, tuple):
                key, vec = key
                table.add(namespace, key, np.asarray(vec, dtype=np.float64))
            else:
                table.add(namespace, key, rng.normal(size=dim))
    return table


BASE_PIECES = [START_TOKEN, END_TOKEN, UNK_TOKEN, SEPARATOR_TEXT]


@pytest.fixture
def wordpiece_table():
    pieces = BASE_PIECES + [
        "who", "is", "this", "the", "a", "in", "of", "was", "born", "?", ".",
        "barack", "obama", "oba", "##ma", "paris", "park", "ada", "lovelace",
        "apollo", "program", "eiffel", "tower", "pilot", "nikola", "tesla",
    ]
    return make_table(8, pieces=pieces, cased=False, rng=np.random.default_rng(7))


@pytest.fixture
def wiki_table():
    rng = np.random.default_rng(11)
    return make_table(
        4,
        words=["the", "barack", "obama", "paris"],
        entities=["Barack Obama", "Paris", "Ada Lovelace", "Apollo Program"],
        cased=True,
        rng=rng,
    )


@pytest.fixture
def identity_alignment(wordpiece_table, wiki_table):
    # wiki dim 4 -> wordpiece dim 8 via a fixed full-rank map
    rng = np.random.default_rng(3)
    matrix = rng.normal(size=(8, 4))
    return AlignmentMap(matrix=matrix, source_dim=4, target_dim=8,
                        fit_info={"num_shared_keys": 0, "sum_squared_residual": 0.0})
