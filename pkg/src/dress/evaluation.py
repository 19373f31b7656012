"""Perplexity and parameter/activation mass ratios."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .channels import ChannelMask, dependency_closure
from .data import eval_windows
from .errors import DataError, DimensionError
from .model import ModelParams, forward, shift_targets


@dataclass
class EvalReport:
    perplexity: float
    tokens: int
    nll_mean: float
    nll_std: float

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("perplexity", "tokens", "nll_mean", "nll_std"))
            w.writerow((repr(float(self.perplexity)), self.tokens, repr(float(self.nll_mean)), repr(float(self.nll_std))))


def write_eval_csv(path, reports):
    """One row per labelled :class:`EvalReport` in ``reports`` (a mapping)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("model", "perplexity", "tokens", "nll_mean", "nll_std"))
        for label, r in reports.items():
            w.writerow((label, repr(float(r.perplexity)), r.tokens, repr(float(r.nll_mean)), repr(float(r.nll_std))))


def token_nll(params: ModelParams, windows, batch_size=64):
    """Per-token negative log-likelihoods, predicting each next token inside each window."""
    out = []
    for i in range(0, len(windows), batch_size):
        chunk = np.asarray(windows[i : i + batch_size])
        logits, _ = forward(params, chunk)
        tgt = shift_targets(chunk)[:, :-1].reshape(-1)
        lg = logits.data[:, :-1].reshape(-1, logits.shape[-1])
        nll, _ = kernels.xent_fwd(np.ascontiguousarray(lg), tgt)
        out.append(nll)
    return np.concatenate(out)


def perplexity(params: ModelParams, tokens, seq_len, batch_size=64) -> EvalReport:
    """``exp(mean NLL)`` over consecutive non-overlapping windows of ``tokens``."""
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise DataError("empty evaluation corpus")
    if seq_len < 2:
        raise DimensionError("seq_len must be >= 2 to predict anything")
    nll = token_nll(params, eval_windows(tokens, seq_len), batch_size)
    mean = float(nll.mean())
    ppl = math.exp(mean) if mean < 709.0 else math.inf
    return EvalReport(ppl, int(nll.size), mean, float(nll.std()))


@dataclass
class MassRatioReport:
    """Rows of ``(layer, tensor, preserved_ratio, increased_ratio)``.

    A ratio is ``nan`` (written as ``undefined``) when its before-mass is zero.
    """

    rows: list[dict] = field(default_factory=list)

    def mean(self, key, kind=None):
        vals = [r[key] for r in self.rows if (kind is None or r["kind"] == kind) and not math.isnan(r[key])]
        return float(np.mean(vals)) if vals else float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("layer", "tensor", "slice", "ratio"))
            for r in self.rows:
                for sl, key in (("preserved", "preserved_ratio"), ("increased", "increased_ratio")):
                    v = r[key]
                    w.writerow((r["layer"], r["tensor"], sl, "undefined" if math.isnan(v) else repr(float(v))))


def _ratio(after, before):
    return float(after / before) if before > 0 else float("nan")


def _layer_of(name):
    return int(name[1 : name.index(".")]) if name.startswith("L") and "." in name else -1


def mass_ratios(before: ModelParams, after: ModelParams, mask: ChannelMask, probe=None) -> MassRatioReport:
    """Absolute-value mass after / before on each closure slice and on its complement.

    With a ``probe`` token batch, the residual stream at every block boundary
    is compared the same way over channels ``K`` and the remaining channels.
    """
    if before.config.d != after.config.d or mask.d != before.config.d:
        raise DimensionError("mass ratios need both models at the mask's width")
    rep = MassRatioReport()
    for e in dependency_closure(mask, before.config):
        b, a = before[e.tensor], after[e.tensor]
        if a.shape != b.shape:
            raise DimensionError(f"{e.tensor} changed shape")
        rep.rows.append(
            {
                "layer": _layer_of(e.tensor),
                "tensor": e.tensor.split(".")[-1],
                "kind": "matrix" if b.ndim == 2 else "vector",
                "preserved_ratio": _ratio(np.abs(e.slice_of(a)).sum(), np.abs(e.slice_of(b)).sum()),
                "increased_ratio": _ratio(np.abs(e.complement_of(a)).sum(), np.abs(e.complement_of(b)).sum()),
            }
        )
    if probe is not None:
        acts_b, acts_a = [], []
        forward(before, probe, capture=acts_b)
        forward(after, probe, capture=acts_a)
        keep = mask.keep
        for i, (xb, xa) in enumerate(zip(acts_b, acts_a)):
            rep.rows.append(
                {
                    "layer": i - 1,
                    "tensor": "activation",
                    "kind": "activation",
                    "preserved_ratio": _ratio(np.abs(xa[..., list(mask.K)]).sum(), np.abs(xb[..., list(mask.K)]).sum()),
                    "increased_ratio": _ratio(np.abs(xa[..., keep]).sum(), np.abs(xb[..., keep]).sum()),
                }
            )
    return rep
