"""Channel-targeted regularization before pruning.

The training objective is the language-modelling loss plus three penalty
groups, all scaled by one weight ``lam``:

* attention: ``W_Q``, ``W_K``, ``W_V`` rows and ``W_o`` columns at ``K``
* FFN: ``W_up`` (and ``W_gate``) rows and ``W_down`` columns at ``K``
* remain: ``W_emb``/``W_pos`` columns, gain/offset elements and ``W_lm`` rows

Each penalty is a column-wise group norm of the selected slice. Under the
``l1`` flag the norm is the sum of absolute values; the auxiliary bound
variables of its linear-programming form are eliminated at their optimum
``y = |x|`` (see :func:`l1_epigraph`), leaving a subgradient ``lam * sign``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .channels import ChannelMask, ClosureEntry, dependency_closure
from .errors import ConfigError, DataError, NumericError
from .model import ModelParams, forward

log = logging.getLogger(__name__)

NORMS = ("l1", "l2")


@dataclass
class RegConfig:
    lam: float = 1e-3
    norm: str = "l2"
    steps: int = 300
    lr: float = 1.0
    batch_size: int = 32
    seed: int = 0
    reduce: str = "sum"
    include_lm: bool = True
    patience: int = 0
    eval_every: int = 25
    clip: float = 0.25

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}")
        if self.reduce not in ("sum", "norm"):
            raise ConfigError("reduce must be 'sum' or 'norm'")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.clip >= 0:
            raise ConfigError("clip must be >= 0 (0 disables clipping)")


@dataclass
class RegReport:
    rows: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    stopped_early: bool = False

    COLUMNS = ("step", "lm", "att", "ffn", "remain", "total")

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["step"]] + [repr(float(r[c])) for c in self.COLUMNS[1:]])


def group_norm_columnwise(M, entry: ClosureEntry, norm="l2", reduce="sum"):
    """Group norm of the slice ``entry`` of ``M`` as a scalar tensor.

    ``l2``: sum over columns of the 2-norm of each column restricted to the
    slice (rows/columns swap for column restrictions); vectors use the plain
    2-norm. ``l1``: sum of absolute values over the slice.
    """
    if norm not in NORMS:
        raise ConfigError(f"norm must be one of {NORMS}")
    if not entry.indices:
        log.debug("empty slice for %s; group norm is 0", entry.tensor)
    return ag.group_norm(M, entry.indices, axis=entry.axis, ord=norm, reduce=reduce)


def _group_of(name):
    short = name.split(".")[-1]
    if name.startswith("L") and short in ("W_Q", "W_K", "W_V", "W_o"):
        return "att"
    if name.startswith("L") and short in ("W_up", "W_gate", "W_down"):
        return "ffn"
    return "remain"


def reg_loss(params: ModelParams, mask: ChannelMask, lam, norm="l2", weights=None, reduce="sum"):
    """Return the ``(att, ffn, remain)`` penalty tensors for ``mask``."""
    if not lam >= 0:
        raise ConfigError(f"lam must be >= 0, got {lam}")
    W = params.tensors if weights is None else {**params.tensors, **weights}
    terms = {"att": [], "ffn": [], "remain": []}
    for entry in dependency_closure(mask, params.config):
        terms[_group_of(entry.tensor)].append(group_norm_columnwise(W[entry.tensor], entry, norm, reduce))
    out = []
    for key in ("att", "ffn", "remain"):
        acc = terms[key][0]
        for t in terms[key][1:]:
            acc = ag.add(acc, t)
        out.append(ag.scale(acc, lam))
    return tuple(out)


def l1_epigraph(x):
    """Optimal bound variable and value of ``min 1^T y  s.t. -y <= x <= y, y >= 0``.

    The problem separates per coordinate; the smallest feasible ``y_i`` is
    ``max(x_i, -x_i, 0)``, so ``y* = |x|`` and the optimum equals ``||x||_1``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.maximum(np.maximum(x, -x), 0.0)
    return y, float(y.sum())


def batches(windows, batch_size, steps, seed):
    """Yield ``steps`` deterministic mini-batches of rows of ``windows``.

    Rows are visited in seeded random order, one full pass (epoch) at a time.
    """
    windows = np.asarray(windows)
    if len(windows) == 0:
        raise DataError("no training windows")
    rng = np.random.default_rng(seed)
    order, pos = rng.permutation(len(windows)), 0
    bs = min(batch_size, len(windows))
    for _ in range(steps):
        if pos + bs > len(order):
            order, pos = rng.permutation(len(windows)), 0
        yield windows[order[pos : pos + bs]]
        pos += bs


def mean_lm_loss(params, windows, batch_size=64):
    tot, n = 0.0, 0
    for i in range(0, len(windows), batch_size):
        chunk = windows[i : i + batch_size]
        _, loss = forward(params, chunk)
        tot += loss.item() * len(chunk)
        n += len(chunk)
    return tot / n


def regularize(params: ModelParams, X1, mask: ChannelMask, cfg: RegConfig, val=None):
    """Gradient descent on ``lm + att + ffn + remain`` over windows of ``X1``.

    Returns the updated parameters and a per-step loss decomposition. A
    positive ``cfg.clip`` caps the global gradient norm of each step. With
    ``cfg.patience > 0`` and validation windows ``val``, training stops once
    the validation loss has not improved for ``patience`` evaluations.
    """
    if len(X1) == 0:
        raise DataError("regularization data X1 is empty")
    report = RegReport()
    t0 = time.perf_counter()
    tensors = dict(params.tensors)
    best, bad = np.inf, 0
    for step, batch in enumerate(batches(X1, cfg.batch_size, cfg.steps, cfg.seed)):
        cur = ModelParams(params.config, tensors)
        W = {k: ag.Tensor(v, requires_grad=True, check=False) for k, v in tensors.items()}
        try:
            with ag.Tape() as tape:
                att, ffn, rem = reg_loss(cur, mask, cfg.lam, cfg.norm, weights=W, reduce=cfg.reduce)
                if cfg.include_lm:
                    _, lm = forward(cur, batch, weights=W)
                else:
                    lm = ag.Tensor(0.0)
                lm_val = lm.item()
                total = ag.add(ag.add(ag.add(lm, att), ffn), rem)
                tape.backward(total)
            lr = cfg.lr
            if cfg.clip:
                gnorm = np.sqrt(sum(float(np.vdot(t.grad, t.grad)) for t in W.values() if t.grad is not None))
                if gnorm > cfg.clip:
                    lr = cfg.lr * cfg.clip / gnorm
            new = {}
            for k, v in tensors.items():
                g = W[k].grad
                new[k] = v if g is None else v - lr * g
                if g is not None and not np.isfinite(new[k]).all():
                    raise NumericError(f"update of {k} is not finite")
        except NumericError as exc:
            raise NumericError(f"regularization diverged at step {step}: {exc}", step=step - 1) from exc
        report.rows.append(
            {
                "step": step,
                "lm": lm_val,
                "att": att.item(),
                "ffn": ffn.item(),
                "remain": rem.item(),
                "total": total.item(),
            }
        )
        tensors = new
        if cfg.patience and val is not None and (step + 1) % cfg.eval_every == 0:
            v = mean_lm_loss(ModelParams(params.config, tensors), val)
            if v < best:
                best, bad = v, 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    report.stopped_early = True
                    break
    report.wall_time = time.perf_counter() - t0
    return ModelParams(params.config, tensors), report
