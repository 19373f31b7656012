"""Toy pre-norm decoder-only transformer.

Parameters live in a flat ordered mapping ``name -> float64 array``. Matrices
use the ``x @ W`` convention, so a matrix of shape ``(a, b)`` reads an
``a``-dimensional input. Per-layer names are prefixed ``L{i}.``::

    W_emb (V, d)   W_pos (n_max, d)
    L{i}.alpha_att, L{i}.beta_att (d,)
    L{i}.W_Q, L{i}.W_K, L{i}.W_V (d, d1)   L{i}.W_o (d1, d)
    L{i}.alpha_ffn, L{i}.beta_ffn (d,)
    L{i}.W_up, [L{i}.W_gate] (d, d2)        L{i}.W_down (d2, d)
    alpha_f, beta_f (d,)   W_lm (d, V)
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    d1: int = 64
    d2: int = 256
    layers: int = 2
    vocab: int = 256
    n_max: int = 64
    heads: int = 4
    gated_ffn: bool = False
    eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        for name in ("d", "d1", "d2", "layers", "vocab", "n_max", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d1 % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide d1={self.d1}")
        if not self.eps >= 0:
            raise ConfigError("eps must be non-negative")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, d1, d2 = cfg.d, cfg.d1, cfg.d2
    shapes = {"W_emb": (cfg.vocab, d), "W_pos": (cfg.n_max, d)}
    for i in range(cfg.layers):
        p = f"L{i}."
        shapes[p + "alpha_att"] = (d,)
        shapes[p + "beta_att"] = (d,)
        shapes[p + "W_Q"] = (d, d1)
        shapes[p + "W_K"] = (d, d1)
        shapes[p + "W_V"] = (d, d1)
        shapes[p + "W_o"] = (d1, d)
        shapes[p + "alpha_ffn"] = (d,)
        shapes[p + "beta_ffn"] = (d,)
        shapes[p + "W_up"] = (d, d2)
        if cfg.gated_ffn:
            shapes[p + "W_gate"] = (d, d2)
        shapes[p + "W_down"] = (d2, d)
    shapes["alpha_f"] = (d,)
    shapes["beta_f"] = (d,)
    shapes["W_lm"] = (d, cfg.vocab)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def replace(self, config=None, **tensors):
        new = dict(self.tensors)
        new.update(tensors)
        return ModelParams(config or self.config, new)

    def equal(self, other):
        """Bit-exact equality of configuration and every tensor."""
        return (
            self.config == other.config
            and list(self.tensors) == list(other.tensors)
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
        )


def init_model(cfg: ModelConfig) -> ModelParams:
    """Seeded init: gains 1, offsets 0, matrices ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        short = name.split(".")[-1]
        if short.startswith("alpha"):
            tensors[name] = np.ones(shape)
        elif short.startswith("beta"):
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(cfg, tensors)


def count_params(params: ModelParams):
    """Return ``(total, {name: count})``."""
    per = {k: int(v.size) for k, v in params.tensors.items()}
    return sum(per.values()), per


def expected_param_count(cfg: ModelConfig) -> int:
    d, d1, d2, g = cfg.d, cfg.d1, cfg.d2, int(cfg.gated_ffn)
    per_layer = 3 * d * d1 + d1 * d + d * d2 * (1 + g) + d2 * d + 4 * d
    return cfg.vocab * d + cfg.n_max * d + cfg.layers * per_layer + 2 * d + d * cfg.vocab


def shift_targets(tokens):
    """Next-token targets; the last position of each row is ignored (``-1``)."""
    tokens = np.asarray(tokens)
    tgt = np.full(tokens.shape, -1, dtype=np.int64)
    tgt[:, :-1] = tokens[:, 1:]
    return tgt


def _attention(h, wq, wk, wv, wo, heads):
    b, n, _ = h.shape
    d1 = wq.shape[1]
    dh = d1 // heads

    def split(t):
        return ag.transpose(ag.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(ag.matmul(h, wq))
    k = split(ag.matmul(h, wk))
    v = split(ag.matmul(h, wv))
    scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2)))
    probs = ag.causal_softmax(scores, 1.0 / math.sqrt(dh))
    ctx = ag.matmul(probs, v)
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, n, d1))
    return ag.matmul(ctx, wo)


def forward(params: ModelParams, tokens, targets=None, weights=None, capture=None):
    """Run the model on integer ``tokens`` of shape ``(b, n)``.

    Returns ``(logits, lm_loss)``. ``weights`` optionally overrides entries of
    ``params.tensors`` (for example with gradient-tracking tensors or adapted
    weights). ``targets`` defaults to the tokens shifted by one. If
    ``capture`` is a list, the residual stream after the embedding and after
    every block is appended to it.
    """
    cfg = params.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be (b, n), got {tokens.shape}")
    b, n = tokens.shape
    if n > cfg.n_max:
        raise DimensionError(f"sequence length {n} exceeds n_max={cfg.n_max}")
    W = params.tensors if weights is None else {**params.tensors, **weights}

    x = ag.add(ag.embedding(W["W_emb"], tokens), ag.embedding(W["W_pos"], np.arange(n)))
    if capture is not None:
        capture.append(x.data)
    for i in range(cfg.layers):
        p = f"L{i}."
        h = ag.rmsnorm(x, W[p + "alpha_att"], W[p + "beta_att"], cfg.eps)
        x = ag.add(x, _attention(h, W[p + "W_Q"], W[p + "W_K"], W[p + "W_V"], W[p + "W_o"], cfg.heads))
        h = ag.rmsnorm(x, W[p + "alpha_ffn"], W[p + "beta_ffn"], cfg.eps)
        up = ag.matmul(h, W[p + "W_up"])
        if cfg.gated_ffn:
            act = ag.mul(ag.gelu(ag.matmul(h, W[p + "W_gate"])), up)
        else:
            act = ag.gelu(up)
        x = ag.add(x, ag.matmul(act, W[p + "W_down"]))
        if capture is not None:
            capture.append(x.data)
    h = ag.rmsnorm(x, W["alpha_f"], W["beta_f"], cfg.eps)
    logits = ag.matmul(h, W["W_lm"])
    if targets is None:
        targets = shift_targets(tokens)
    loss = ag.cross_entropy(logits, targets)
    return logits, loss
