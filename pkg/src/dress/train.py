"""Base language-model training with Adam over random corpus windows."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data import random_windows
from .errors import ConfigError, NumericError
from .model import ModelParams, forward


@dataclass
class TrainConfig:
    steps: int = 1500
    lr: float = 3e-3
    batch_size: int = 32
    warmup: int = 50
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("step", "lm", "lr"))
            for r in self.rows:
                w.writerow((r["step"], repr(float(r["lm"])), repr(float(r["lr"]))))


def _lr_at(cfg, step):
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(1, cfg.steps - cfg.warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup) / span))


def train_base(params: ModelParams, tokens, cfg: TrainConfig):
    """Train every tensor on fresh random windows of length ``n_max``; linear warmup then cosine decay."""
    rng = np.random.default_rng(cfg.seed)
    seq = params.config.n_max
    tensors = {k: v.copy() for k, v in params.tensors.items()}
    m = {k: np.zeros_like(v) for k, v in tensors.items()}
    s = {k: np.zeros_like(v) for k, v in tensors.items()}
    report = TrainReport()
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        batch = random_windows(tokens, cfg.batch_size, seq, rng)
        W = {k: ag.Tensor(v, requires_grad=True, check=False) for k, v in tensors.items()}
        with ag.Tape() as tape:
            _, loss = forward(ModelParams(params.config, tensors), batch, weights=W)
            tape.backward(loss)
        lr = _lr_at(cfg, step)
        c1 = 1.0 - cfg.beta1 ** (step + 1)
        c2 = 1.0 - cfg.beta2 ** (step + 1)
        for k, v in tensors.items():
            g = W[k].grad
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g
            s[k] = cfg.beta2 * s[k] + (1.0 - cfg.beta2) * g * g
            upd = (m[k] / c1) / (np.sqrt(s[k] / c2) + 1e-8)
            if cfg.weight_decay and v.ndim == 2:
                upd = upd + cfg.weight_decay * v
            tensors[k] = v - lr * upd
        if not np.isfinite(loss.item()):
            raise NumericError(f"base training diverged at step {step}", step=step - 1)
        report.rows.append({"step": step, "lm": loss.item(), "lr": lr})
    report.wall_time = time.perf_counter() - t0
    return ModelParams(params.config, tensors), report
