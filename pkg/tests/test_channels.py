import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dress.channels import (
    ChannelMask,
    dependency_closure,
    n_pruned,
    rank1_annihilation_check,
    rank1_sum,
    select_channels,
)
from dress.errors import ConfigError, DimensionError
from dress.model import ModelConfig


def test_counts_and_rounding():
    assert n_pruned(64, 0.25) == 16
    assert n_pruned(10, 0.25) == 3  # 2.5 rounds up
    assert len(select_channels("last", 100, 0.3).K) == 30


def test_strategies():
    assert select_channels("last", 8, 0.25).K == (6, 7)
    assert select_channels("first", 8, 0.25).K == (0, 1)
    assert select_channels("segmented", 20, 0.2, segments=4).K == (4, 9, 14, 19)
    # 5 channels over 4 segments: the last segment takes the extra one
    assert select_channels("segmented", 20, 0.25, segments=4).K == (4, 9, 14, 18, 19)


def test_selection_errors():
    with pytest.raises(ConfigError):
        select_channels("middle", 8, 0.25)
    with pytest.raises(ConfigError):
        select_channels("last", 8, 1.0)
    with pytest.raises(ConfigError):
        select_channels("last", 4, 0.9)  # rounds to all 4 channels
    with pytest.raises(ConfigError):
        select_channels("segmented", 64, 0.25, segments=5)
    with pytest.raises(DimensionError):
        ChannelMask(4, (4,), 0.25)


@given(st.sampled_from(["last", "first", "segmented"]), st.integers(1, 16), st.floats(0, 0.9))
def test_selection_properties(strategy, seg_size, p):
    d = 4 * seg_size
    k = n_pruned(d, p)
    if k >= d:
        return
    m = select_channels(strategy, d, p, segments=4)
    assert len(m.K) == k and len(set(m.K)) == k
    assert sorted(set(m.K) | set(m.keep.tolist())) == list(range(d))
    assert m.d_kept == d - k
    np.testing.assert_array_equal(np.flatnonzero(m.selector()), m.index)


def test_p_zero_gives_empty_mask():
    m = select_channels("last", 64, 0.0)
    assert m.K == () and m.d_kept == 64


def test_closure_count():
    one = dependency_closure(select_channels("last", 8, 0.25), ModelConfig(d=8, d1=8, d2=8, layers=1, heads=2))
    assert len(one) == 15
    two = dependency_closure(
        select_channels("last", 8, 0.25), ModelConfig(d=8, d1=8, d2=8, layers=2, heads=2, gated_ffn=True)
    )
    assert len(two) == 27


def test_closure_axes():
    cfg = ModelConfig(d=8, d1=8, d2=8, layers=1, heads=2)
    axes = {e.tensor: e.axis for e in dependency_closure(select_channels("first", 8, 0.25), cfg)}
    assert axes["W_emb"] == axes["W_pos"] == axes["L0.W_o"] == axes["L0.W_down"] == "columns"
    assert axes["L0.W_Q"] == axes["L0.W_up"] == axes["W_lm"] == "rows"
    assert axes["L0.alpha_att"] == axes["beta_f"] == "elements"


def test_closure_slices(rng):
    cfg = ModelConfig(d=8, d1=8, d2=8, layers=1, heads=2)
    m = select_channels("first", 8, 0.25)
    e = next(x for x in dependency_closure(m, cfg) if x.tensor == "W_emb")
    w = rng.standard_normal((3, 8))
    np.testing.assert_array_equal(e.slice_of(w), w[:, [0, 1]])
    np.testing.assert_array_equal(e.complement_of(w), w[:, 2:])


def test_rank1_expansion(rng):
    A, B = rng.standard_normal((5, 7)), rng.standard_normal((7, 4))
    np.testing.assert_allclose(rank1_sum(A, B), A @ B, rtol=1e-13, atol=1e-13)
    K = [1, 5]
    manual = sum(np.outer(A[:, k], B[k]) for k in K)
    np.testing.assert_allclose(rank1_sum(A, B, K), manual, rtol=1e-13, atol=1e-13)


@given(st.integers(0, 2**31 - 1))
def test_annihilation_property(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 9))
    K = sorted(r.choice(n, size=int(r.integers(1, n)), replace=False).tolist())
    A, B = r.standard_normal((4, n)), r.standard_normal((n, 3))
    assert rank1_annihilation_check(A, B, K) < 1e-12
