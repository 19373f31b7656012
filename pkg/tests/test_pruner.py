import numpy as np
import pytest

from dress.channels import dependency_closure, select_channels
from dress.errors import DimensionError, PreconditionError
from dress.model import forward, param_shapes
from dress.pruner import apply_mask, compact, equivalence_check, prune


@pytest.mark.parametrize("strategy", ["last", "first", "segmented"])
@pytest.mark.parametrize("p", [0.1, 0.25, 0.5])
def test_masked_equals_compacted(tiny_params, tiny_tokens, strategy, p):
    mask = select_channels(strategy, tiny_params.config.d, p, segments=4)
    masked = apply_mask(tiny_params, mask)
    comp, rep = compact(masked, mask)
    worst, ok = equivalence_check(masked, comp, [tiny_tokens])
    assert ok and worst < 1e-12
    assert comp.config.d == mask.d_kept and rep.d_kept == mask.d_kept


def test_rescale_is_required(tiny_params, tiny_tokens):
    mask = select_channels("last", tiny_params.config.d, 0.25)
    masked = apply_mask(tiny_params, mask)
    comp, _ = compact(masked, mask, rescale=False)
    worst, ok = equivalence_check(masked, comp, [tiny_tokens])
    assert not ok and worst > 1e-3


def test_compacted_shapes_match_config(tiny_params):
    mask = select_channels("first", tiny_params.config.d, 0.25)
    comp, rep = prune(tiny_params, mask)
    for k, shape in param_shapes(comp.config).items():
        assert comp[k].shape == shape
    assert rep.params_after < rep.params_before
    assert rep.gain_scale == pytest.approx(np.sqrt(12 / 9))


def test_apply_mask_only_touches_closure(tiny_params):
    mask = select_channels("segmented", tiny_params.config.d, 0.25, segments=4)
    masked = apply_mask(tiny_params, mask)
    for e in dependency_closure(mask, tiny_params.config):
        assert np.all(e.slice_of(masked[e.tensor]) == 0)
        np.testing.assert_array_equal(e.complement_of(masked[e.tensor]), e.complement_of(tiny_params[e.tensor]))
    # the original is untouched
    assert np.any(tiny_params["W_emb"][:, list(mask.K)] != 0)


def test_p_zero_is_identity(tiny_params, tiny_tokens):
    mask = select_channels("last", tiny_params.config.d, 0.0)
    comp, rep = prune(tiny_params, mask)
    assert comp.equal(tiny_params) and rep.n_pruned == 0


def test_compact_refuses_unmasked(tiny_params):
    mask = select_channels("last", tiny_params.config.d, 0.25)
    with pytest.raises(PreconditionError):
        compact(tiny_params, mask)
    with pytest.raises(DimensionError):
        apply_mask(tiny_params, select_channels("last", 16, 0.25))


def _perturb(params, entry, rng, scale=1e-3):
    w = params.tensors[entry.tensor].copy()
    delta = scale * rng.standard_normal(entry.slice_of(w).shape)
    if entry.axis == "rows":
        w[list(entry.indices), :] += delta
    elif entry.axis == "columns":
        w[:, list(entry.indices)] += delta
    else:
        w[list(entry.indices)] += delta
    return params.replace(**{entry.tensor: w})


READ_SIDE = ("W_Q", "W_K", "W_V", "W_up", "W_lm", "alpha_att", "beta_att", "alpha_ffn", "beta_ffn", "alpha_f", "beta_f")


def test_read_side_slices_are_exactly_inert(tiny_params, tiny_tokens, rng):
    mask = select_channels("last", tiny_params.config.d, 0.25)
    masked = apply_mask(tiny_params, mask)
    ref, _ = forward(masked, tiny_tokens)
    for e in dependency_closure(mask, tiny_params.config):
        if e.tensor.split(".")[-1] not in READ_SIDE:
            continue
        out, _ = forward(_perturb(masked, e, rng, 1.0), tiny_tokens)
        np.testing.assert_array_equal(out.data, ref.data, err_msg=e.tensor)


def test_write_side_slices_act_only_through_norm_statistics(tiny_params, tiny_tokens, rng):
    # writing into a pruned channel cannot reach any logit linearly, but it does
    # enter later RMS denominators, so the effect is second order in the size
    mask = select_channels("last", tiny_params.config.d, 0.25)
    masked = apply_mask(tiny_params, mask)
    ref, _ = forward(masked, tiny_tokens)
    for e in dependency_closure(mask, tiny_params.config):
        if e.tensor.split(".")[-1] in READ_SIDE:
            continue
        devs = []
        for s in (1e-2, 1e-3):
            out, _ = forward(_perturb(masked, e, np.random.default_rng(5), s), tiny_tokens)
            devs.append(np.abs(out.data - ref.data).max())
        assert devs[0] > 0, e.tensor
        assert devs[1] / devs[0] < 0.02, e.tensor  # ~100x per 10x: quadratic
