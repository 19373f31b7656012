import math

import numpy as np
import pytest

from dress.channels import select_channels
from dress.errors import DataError
from dress.evaluation import mass_ratios, perplexity, token_nll, write_eval_csv
from dress.model import forward


def test_perplexity_by_hand(tiny_params, rng):
    n = tiny_params.config.n_max
    toks = rng.integers(0, tiny_params.config.vocab, 3 * n + 4)
    rep = perplexity(tiny_params, toks, n)
    total, count = 0.0, 0
    for w in range(3):
        win = toks[w * n : (w + 1) * n][None]
        logits, _ = forward(tiny_params, win)
        lg = logits.data[0]
        for i in range(n - 1):
            row = lg[i]
            total += np.log(np.exp(row - row.max()).sum()) + row.max() - row[win[0, i + 1]]
            count += 1
    assert rep.tokens == count
    assert rep.perplexity == pytest.approx(math.exp(total / count), rel=1e-12)


def test_concatenation_is_token_weighted_geometric_mean(tiny_params, rng):
    n = tiny_params.config.n_max
    a = rng.integers(0, tiny_params.config.vocab, 2 * n)
    b = rng.integers(0, tiny_params.config.vocab, 5 * n)
    ra, rb = perplexity(tiny_params, a, n), perplexity(tiny_params, b, n)
    rab = perplexity(tiny_params, np.concatenate([a, b]), n)
    geo = math.exp((ra.tokens * math.log(ra.perplexity) + rb.tokens * math.log(rb.perplexity)) / (ra.tokens + rb.tokens))
    assert abs(rab.perplexity - geo) < 1e-10


def test_batching_does_not_change_nll(tiny_params, rng):
    wins = rng.integers(0, tiny_params.config.vocab, (5, tiny_params.config.n_max))
    np.testing.assert_allclose(token_nll(tiny_params, wins, 2), token_nll(tiny_params, wins, 5), rtol=1e-13)


def test_empty_corpus_rejected(tiny_params):
    with pytest.raises(DataError):
        perplexity(tiny_params, np.zeros(0, dtype=int), 8)


def test_mass_ratios_on_constructed_change(tiny_params, tiny_tokens):
    mask = select_channels("last", tiny_params.config.d, 0.25)
    after = tiny_params.copy()
    K = list(mask.K)
    after.tensors["L0.W_Q"][K, :] *= 0.5
    keep = mask.keep
    after.tensors["L0.W_Q"][keep, :] *= 2.0
    rep = mass_ratios(tiny_params, after, mask, probe=tiny_tokens)
    row = next(r for r in rep.rows if r["layer"] == 0 and r["tensor"] == "W_Q")
    assert row["preserved_ratio"] == pytest.approx(0.5, rel=1e-13)
    assert row["increased_ratio"] == pytest.approx(2.0, rel=1e-13)
    same = next(r for r in rep.rows if r["layer"] == 1 and r["tensor"] == "W_K")
    assert same["preserved_ratio"] == 1.0 and same["increased_ratio"] == 1.0
    acts = [r for r in rep.rows if r["kind"] == "activation"]
    assert [r["layer"] for r in acts] == [-1, 0, 1]
    # the embedding is unchanged, so its activation ratios are exactly one
    assert acts[0]["preserved_ratio"] == 1.0


def test_mass_ratio_undefined_when_before_is_zero(tiny_params, tmp_path):
    mask = select_channels("last", tiny_params.config.d, 0.25)
    before = tiny_params.copy()
    before.tensors["L0.beta_att"][:] = 0.0
    rep = mass_ratios(before, tiny_params, mask)
    row = next(r for r in rep.rows if r["tensor"] == "beta_att" and r["layer"] == 0)
    assert math.isnan(row["preserved_ratio"])
    rep.write_csv(tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_text()
    assert text.startswith("layer,tensor,slice,ratio") and "undefined" in text


def test_eval_csv(tmp_path, tiny_params, rng):
    rep = perplexity(tiny_params, rng.integers(0, 20, 40), 10)
    write_eval_csv(tmp_path / "e.csv", {"final": rep})
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0] == "model,perplexity,tokens,nll_mean,nll_std"
    assert rows[1].startswith("final,") and float(rows[1].split(",")[1]) == rep.perplexity
