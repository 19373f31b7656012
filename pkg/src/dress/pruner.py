"""Projection onto the kept channels and physical compaction.

Masking zeroes every closure slice and keeps tensor shapes. Compaction then
deletes those slices, shrinking the residual width from ``d`` to
``d' = d - |K|``. RMS statistics are taken over the full width, so compaction
rescales every surviving gain by ``sqrt(d / d')`` and the epsilon by
``d / d'``. With that correction the compacted model reproduces the masked
model exactly (up to rounding).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .channels import ChannelMask, dependency_closure
from .errors import DimensionError, PreconditionError
from .model import ModelParams, count_params


@dataclass
class PruneReport:
    d: int
    d_kept: int
    n_pruned: int
    params_before: int
    params_after: int
    achieved_ratio: float
    max_residual_mass: float
    gain_scale: float

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def _zeroed(arr, entry):
    out = arr.copy()
    idx = list(entry.indices)
    if entry.axis == "rows":
        out[idx, :] = 0.0
    elif entry.axis == "columns":
        out[:, idx] = 0.0
    else:
        out[idx] = 0.0
    return out


def apply_mask(params: ModelParams, mask: ChannelMask) -> ModelParams:
    """Zero every closure slice; all other entries are left bit-identical."""
    if mask.d != params.config.d:
        raise DimensionError(f"mask is over d={mask.d}, model has d={params.config.d}")
    if not mask.K:
        return params.copy()
    tensors = dict(params.tensors)
    for entry in dependency_closure(mask, params.config):
        tensors[entry.tensor] = _zeroed(tensors[entry.tensor], entry)
    return ModelParams(params.config, tensors)


def slice_mass(params: ModelParams, mask: ChannelMask):
    """``{tensor: sum |w|}`` over each closure slice."""
    return {e.tensor: float(np.abs(e.slice_of(params[e.tensor])).sum()) for e in dependency_closure(mask, params.config)}


def compact(masked: ModelParams, mask: ChannelMask, rescale=True, residual_mass=0.0):
    """Delete the masked slices and return ``(compact_params, PruneReport)``.

    Refuses to run when a masked slice still holds nonzero values. Setting
    ``rescale=False`` skips the gain and epsilon correction, which exists
    only to demonstrate that the correction is required.
    """
    cfg = masked.config
    if mask.d != cfg.d:
        raise DimensionError(f"mask is over d={mask.d}, model has d={cfg.d}")
    closure = dependency_closure(mask, cfg)
    for entry in closure:
        resid = np.abs(entry.slice_of(masked[entry.tensor]))
        if resid.size and resid.max() != 0.0:
            raise PreconditionError(
                f"{entry.tensor} {entry.axis} at K are not zero (max |w| = {resid.max():.3e}); apply_mask first"
            )
    d, dk = cfg.d, mask.d_kept
    keep = mask.keep
    factor = math.sqrt(d / dk) if rescale else 1.0
    tensors = dict(masked.tensors)
    for entry in closure:
        arr = tensors[entry.tensor]
        if entry.axis == "rows":
            arr = arr[keep, :]
        elif entry.axis == "columns":
            arr = arr[:, keep]
        else:
            arr = arr[keep]
            if entry.tensor.split(".")[-1].startswith("alpha"):
                arr = arr * factor
        tensors[entry.tensor] = np.ascontiguousarray(arr)
    new_cfg = cfg.replace(d=dk, eps=cfg.eps * d / dk if rescale else cfg.eps)
    out = ModelParams(new_cfg, {k: tensors[k] for k in masked.tensors})
    before, _ = count_params(masked)
    after, _ = count_params(out)
    report = PruneReport(
        d=d,
        d_kept=dk,
        n_pruned=len(mask.K),
        params_before=before,
        params_after=after,
        achieved_ratio=1.0 - after / before,
        max_residual_mass=float(residual_mass),
        gain_scale=factor,
    )
    return out, report


def prune(params: ModelParams, mask: ChannelMask):
    """Mask then compact; the report records the largest slice mass removed."""
    mass = slice_mass(params, mask) if mask.K else {}
    masked = apply_mask(params, mask)
    return compact(masked, mask, residual_mass=max(mass.values(), default=0.0))


def equivalence_check(masked: ModelParams, compacted: ModelParams, token_batches, tol=1e-9):
    """Return ``(max |logit difference|, passed)`` over ``token_batches``."""
    from .model import forward

    if masked.config.vocab != compacted.config.vocab:
        raise DimensionError("models have different vocabularies")
    worst = 0.0
    for toks in token_batches:
        a, _ = forward(masked, toks)
        b, _ = forward(compacted, toks)
        worst = max(worst, float(np.abs(a.data - b.data).max()))
    return worst, worst < tol
