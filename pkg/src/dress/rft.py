"""Recovery fine-tuning with low-rank additive adapters.

Each target matrix ``W`` (shape ``rows x cols``) gains a trainable delta
``(scale / rank) * A @ B`` with ``A: rows x rank`` and ``B: rank x cols``.
``B`` starts at zero, so a fresh adapter leaves the model unchanged. Only
``A`` and ``B`` train; ``merge`` folds the delta back into ``W``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError, DataError, NumericError
from .model import ModelParams, forward
from .regularizer import batches

PROJECTIONS = ("W_Q", "W_K", "W_V", "W_o", "W_up", "W_gate", "W_down")


@dataclass
class AdapterConfig:
    rank: int = 4
    scale: float = 10.0
    targets: tuple[str, ...] | None = None
    steps: int = 200
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("adapter rank must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")


def default_targets(params: ModelParams):
    return tuple(k for k in params.tensors if k.startswith("L") and k.split(".")[-1] in PROJECTIONS)


@dataclass
class Adapted:
    base: ModelParams
    A: dict[str, np.ndarray]
    B: dict[str, np.ndarray]
    scale: float
    rank: int

    @property
    def factor(self):
        return self.scale / self.rank

    def weights(self, A=None, B=None):
        """Effective weights ``W + factor * A @ B``; accepts tensors for training."""
        A = self.A if A is None else A
        B = self.B if B is None else B
        return {
            k: ag.add(ag.Tensor(self.base[k], check=False), ag.scale(ag.matmul(A[k], B[k]), self.factor))
            for k in self.A
        }

    def forward(self, tokens):
        return forward(self.base, tokens, weights=self.weights())

    def merge(self) -> ModelParams:
        merged = dict(self.base.tensors)
        for k, w in self.weights().items():
            merged[k] = w.data
        return ModelParams(self.base.config, merged)


def attach_adapters(params: ModelParams, cfg: AdapterConfig) -> Adapted:
    targets = cfg.targets or default_targets(params)
    rng = np.random.default_rng(cfg.seed)
    A, B = {}, {}
    for name in targets:
        if name not in params.tensors or params[name].ndim != 2:
            raise ConfigError(f"adapter target {name!r} is not a matrix of the model")
        rows, cols = params[name].shape
        if cfg.rank > min(rows, cols):
            raise ConfigError(f"rank {cfg.rank} exceeds min dim of {name} {params[name].shape}")
        bound = 1.0 / math.sqrt(rows)
        A[name] = rng.uniform(-bound, bound, size=(rows, cfg.rank))
        B[name] = np.zeros((cfg.rank, cols))
    return Adapted(params, A, B, cfg.scale, cfg.rank)


def check_disjoint(X1, X2):
    """Raise :class:`DataError` if any window appears in both sets."""
    seen = {bytes(np.asarray(r, dtype=np.int64).tobytes()) for r in X1}
    for r in X2:
        if bytes(np.asarray(r, dtype=np.int64).tobytes()) in seen:
            raise DataError("regularization and fine-tuning windows overlap")


@dataclass
class LossTrail:
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("step", "lm"))
            for r in self.rows:
                w.writerow((r["step"], repr(float(r["lm"]))))


def rft_train(adapted: Adapted, X2, cfg: AdapterConfig, X1=None):
    """Minimize the LM loss over adapter factors; return ``(merged, trail, adapted)``."""
    if len(X2) == 0:
        raise DataError("fine-tuning data X2 is empty")
    if X1 is not None:
        check_disjoint(X1, X2)
    A = {k: v.copy() for k, v in adapted.A.items()}
    B = {k: v.copy() for k, v in adapted.B.items()}
    trail = LossTrail()
    for step, batch in enumerate(batches(X2, cfg.batch_size, cfg.steps, cfg.seed)):
        tA = {k: ag.Tensor(v, requires_grad=True, check=False) for k, v in A.items()}
        tB = {k: ag.Tensor(v, requires_grad=True, check=False) for k, v in B.items()}
        try:
            with ag.Tape() as tape:
                _, loss = forward(adapted.base, batch, weights=adapted.weights(tA, tB))
                tape.backward(loss)
            for k in A:
                A[k] = A[k] - cfg.lr * tA[k].grad
                B[k] = B[k] - cfg.lr * tB[k].grad
                if not (np.isfinite(A[k]).all() and np.isfinite(B[k]).all()):
                    raise NumericError(f"adapter update for {k} is not finite")
        except NumericError as exc:
            raise NumericError(f"fine-tuning diverged at step {step}: {exc}", step=step - 1) from exc
        trail.rows.append({"step": step, "lm": loss.item()})
    trained = Adapted(adapted.base, A, B, adapted.scale, adapted.rank)
    if cfg.steps == 0:
        return adapted.base.copy(), trail, trained
    return trained.merge(), trail, trained
