import numpy as np
import pytest

from dress.data import (
    Corpus,
    eval_windows,
    ingest_corpus,
    parse_ratio,
    split_data,
    synthetic_corpus,
    synthetic_text,
)
from dress.errors import ConfigError, DataError


def test_bytes_are_tokens(tmp_path):
    (tmp_path / "a.txt").write_bytes(b"abc")
    c = ingest_corpus([tmp_path / "a.txt"])
    assert c.tokens.tolist() == [97, 98, 99] and c.total_tokens == 3


def test_sorted_ingest_order(tmp_path):
    (tmp_path / "b.txt").write_bytes(b"B")
    (tmp_path / "a.txt").write_bytes(b"A")
    one = ingest_corpus([tmp_path / "b.txt", tmp_path / "a.txt"])
    two = ingest_corpus([tmp_path / "a.txt", tmp_path / "b.txt"])
    assert one.tokens.tolist() == two.tokens.tolist() == [65, 66]
    assert ingest_corpus(tmp_path).tokens.tolist() == [65, 66]


def test_empty_ingest(tmp_path):
    (tmp_path / "e.txt").write_bytes(b"")
    with pytest.raises(DataError):
        ingest_corpus([tmp_path / "e.txt"])


def test_round_trip():
    c = synthetic_corpus(2000, seed=4)
    assert Corpus.from_bytes(c.to_bytes()).tokens.tolist() == c.tokens.tolist()


def test_synthetic_is_seeded():
    assert synthetic_text(5000, 1) == synthetic_text(5000, 1)
    assert synthetic_text(5000, 1) != synthetic_text(5000, 2)
    assert len(synthetic_text(5000, 1)) == 5000


def test_split_sizes_and_disjointness():
    toks = synthetic_corpus(200_000, 0).tokens
    sp = split_data(toks, 1000, 64, "3:1", seed=0)
    assert len(sp.X1) == 750 and len(sp.X2) == 250
    assert not set(sp.offsets1.tolist()) & set(sp.offsets2.tolist())
    assert all(o % 64 == 0 for o in sp.offsets1)
    np.testing.assert_array_equal(sp.X1[0], toks[sp.offsets1[0] : sp.offsets1[0] + 64])


def test_split_determinism():
    toks = synthetic_corpus(50_000, 0).tokens
    a, b = split_data(toks, 100, 32, seed=3), split_data(toks, 100, 32, seed=3)
    c = split_data(toks, 100, 32, seed=4)
    np.testing.assert_array_equal(a.X1, b.X1)
    assert not np.array_equal(a.offsets1, c.offsets1)


def test_degenerate_ratio():
    toks = np.arange(1000) % 256
    sp = split_data(toks, 10, 10, "1:0")
    assert len(sp.X1) == 10 and sp.X2.shape == (0, 10)


def test_split_errors():
    with pytest.raises(DataError):
        split_data(np.zeros(100, dtype=int), 11, 10)
    with pytest.raises(ConfigError):
        parse_ratio("0:0")
    with pytest.raises(ConfigError):
        parse_ratio("a:b")
    assert parse_ratio("3:1") == 0.75 and parse_ratio((1, 1)) == 0.5


def test_holdout_and_eval_windows():
    c = Corpus(np.arange(100))
    tr, ho = c.split_holdout(0.1)
    assert tr.total_tokens == 90 and ho.tokens.tolist() == list(range(90, 100))
    assert eval_windows(np.arange(25), 10).shape == (2, 10)
    with pytest.raises(DataError):
        eval_windows(np.arange(5), 10)
