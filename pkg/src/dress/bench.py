"""Wall-clock throughput and latency of dense vs. compacted models.

Generation uses a tape-free inference path with a key/value cache: one
prompt pass fills the cache, then each new token costs one single-position
step. Prompt latency is the time of one full forward over a prompt.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError
from .model import ModelParams


def _norm(x, W, a, b, eps):
    shape = x.shape
    y, _ = kernels.rmsnorm_fwd(x.reshape(-1, shape[-1]), W[a], W[b], eps)
    return y.reshape(shape)


def _ffn(h, W, p, gated):
    up = h @ W[p + "W_up"]
    if gated:
        g, _ = kernels.gelu_fwd(h @ W[p + "W_gate"])
        act = g * up
    else:
        act, _ = kernels.gelu_fwd(up)
    return act @ W[p + "W_down"]


class KVCache:
    def __init__(self, cfg, batch, length):
        dh = cfg.d1 // cfg.heads
        shape = (batch, cfg.heads, length, dh)
        self.k = [np.zeros(shape) for _ in range(cfg.layers)]
        self.v = [np.zeros(shape) for _ in range(cfg.layers)]
        self.t = 0


def prefill(params: ModelParams, tokens, cache=None):
    """Logits for every prompt position; fills ``cache`` when given."""
    cfg, W = params.config, params.tensors
    tokens = np.asarray(tokens)
    b, n = tokens.shape
    if n > cfg.n_max:
        raise DimensionError(f"prompt of {n} exceeds n_max={cfg.n_max}")
    H, dh = cfg.heads, cfg.d1 // cfg.heads
    scale = 1.0 / math.sqrt(dh)
    x = W["W_emb"][tokens] + W["W_pos"][:n]
    for i in range(cfg.layers):
        p = f"L{i}."
        h = _norm(x, W, p + "alpha_att", p + "beta_att", cfg.eps)
        q = (h @ W[p + "W_Q"]).reshape(b, n, H, dh).transpose(0, 2, 1, 3)
        k = (h @ W[p + "W_K"]).reshape(b, n, H, dh).transpose(0, 2, 1, 3)
        v = (h @ W[p + "W_V"]).reshape(b, n, H, dh).transpose(0, 2, 1, 3)
        if cache is not None:
            cache.k[i][:, :, :n] = k
            cache.v[i][:, :, :n] = v
        probs = kernels.causal_softmax_fwd(q @ k.transpose(0, 1, 3, 2), scale)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, n, cfg.d1)
        x = x + ctx @ W[p + "W_o"]
        h = _norm(x, W, p + "alpha_ffn", p + "beta_ffn", cfg.eps)
        x = x + _ffn(h, W, p, cfg.gated_ffn)
    if cache is not None:
        cache.t = n
    h = _norm(x, W, "alpha_f", "beta_f", cfg.eps)
    return h @ W["W_lm"]


def decode_step(params: ModelParams, cache: KVCache, token):
    """Logits for one new token per sequence at position ``cache.t``."""
    cfg, W = params.config, params.tensors
    t = cache.t
    b = token.shape[0]
    H, dh = cfg.heads, cfg.d1 // cfg.heads
    scale = 1.0 / math.sqrt(dh)
    x = W["W_emb"][token] + W["W_pos"][t]
    for i in range(cfg.layers):
        p = f"L{i}."
        h = _norm(x, W, p + "alpha_att", p + "beta_att", cfg.eps)
        cache.k[i][:, :, t] = (h @ W[p + "W_K"]).reshape(b, H, dh)
        cache.v[i][:, :, t] = (h @ W[p + "W_V"]).reshape(b, H, dh)
        q = (h @ W[p + "W_Q"]).reshape(b, H, dh)
        ctx = kernels.decode_attention(q, cache.k[i], cache.v[i], t, scale).reshape(b, cfg.d1)
        x = x + ctx @ W[p + "W_o"]
        h = _norm(x, W, p + "alpha_ffn", p + "beta_ffn", cfg.eps)
        x = x + _ffn(h, W, p, cfg.gated_ffn)
    cache.t = t + 1
    h = _norm(x, W, "alpha_f", "beta_f", cfg.eps)
    return h @ W["W_lm"]


def generate(params: ModelParams, prompt, gen_len):
    """Greedy decoding of ``gen_len`` tokens after ``prompt``; returns the new tokens."""
    prompt = np.asarray(prompt)
    b, n = prompt.shape
    if n + gen_len > params.config.n_max:
        raise DimensionError(f"prompt {n} + {gen_len} new tokens exceeds n_max={params.config.n_max}")
    cache = KVCache(params.config, b, n + gen_len)
    logits = prefill(params, prompt, cache)[:, -1]
    out = np.empty((b, gen_len), dtype=np.int64)
    for j in range(gen_len):
        tok = logits.argmax(axis=-1)
        out[:, j] = tok
        if j + 1 < gen_len:
            logits = decode_step(params, cache, tok)
    return out


@dataclass
class BenchReport:
    name: str
    tokens_per_second: float
    prompt_latency_ms: float
    generation_s: float
    reps: int
    inner: int
    speedup: float = 1.0
    throughput_increase: float = 1.0
    baseline: str = ""

    def as_row(self):
        return asdict(self)


def _timed(fn, inner):
    t0 = time.perf_counter()
    for _ in range(inner):
        out = fn()
    return (time.perf_counter() - t0) / inner, out


def _calibrate(fn, warmup, min_time):
    for _ in range(warmup):
        fn()
    inner = 1
    while True:
        dt, _ = _timed(fn, inner)
        if dt * inner >= min_time or inner >= 1 << 16:
            return inner
        inner *= 2


def _measure(fns, reps, warmup, min_time):
    """Median seconds per call for each of ``fns``.

    ``inner`` doubles per function until one timing spans ``min_time``. The
    functions are sampled in alternating order (ABBA...) so slow drift in the
    machine's speed cancels out of their ratios.
    """
    inners = [_calibrate(fn, warmup, min_time) for fn in fns]
    samples = [[] for _ in fns]
    outs = [[] for _ in fns]
    for r in range(reps):
        order = range(len(fns)) if r % 2 == 0 else reversed(range(len(fns)))
        for i in order:
            dt, out = _timed(fns[i], inners[i])
            samples[i].append(dt)
            outs[i].append(out)
    return [statistics.median(s) for s in samples], inners, outs


def _workload(params, gen_len, batch, prompt_len, gen_prompt, seed):
    cfg = params.config
    prompt_len = prompt_len or cfg.n_max
    if gen_prompt + gen_len > cfg.n_max:
        raise ConfigError(f"gen_prompt + gen_len must be <= n_max={cfg.n_max}")
    rng = np.random.default_rng(seed)
    prompt = rng.integers(0, cfg.vocab, size=(batch, gen_prompt))
    long_prompt = rng.integers(0, cfg.vocab, size=(1, prompt_len))
    return (lambda: generate(params, prompt, gen_len)), (lambda: prefill(params, long_prompt))


def _reports(models, gen_len, batch, prompt_len, gen_prompt, reps, warmup, seed, min_time):
    if reps < 3:
        raise ConfigError("need at least 3 timed repetitions")
    loads = [_workload(p, gen_len, batch, prompt_len, gen_prompt, seed) for p in models.values()]
    gen_s, gen_inner, outs = _measure([g for g, _ in loads], reps, warmup, min_time)
    for o in outs:
        if any(not np.array_equal(o[0], x) for x in o[1:]):
            raise RuntimeError("generated tokens differ between repetitions")
    lat_s, _, _ = _measure([f for _, f in loads], reps, warmup, min_time)
    reports = [
        BenchReport(name=name, tokens_per_second=batch * gen_len / g, prompt_latency_ms=lat * 1e3, generation_s=g,
                    reps=reps, inner=inner)
        for name, g, lat, inner in zip(models, gen_s, lat_s, gen_inner)
    ]
    return reports, [o[0] for o in outs]


def bench_model(params, name, gen_len=128, batch=64, prompt_len=None, gen_prompt=8, reps=5, warmup=2, seed=0,
                min_time=0.02):
    (report,), (tokens,) = _reports({name: params}, gen_len, batch, prompt_len, gen_prompt, reps, warmup, seed,
                                    min_time)
    return report, tokens


def bench(dense: ModelParams, compact: ModelParams, gen_len=128, batch=64, prompt_len=None, reps=5, gen_prompt=8,
          warmup=2, seed=0, min_time=0.02):
    """Benchmark both models on identical prompts, interleaving their timings.

    The compact report carries the ratios against the dense one.
    """
    if dense.config.vocab != compact.config.vocab or dense.config.n_max != compact.config.n_max:
        raise ConfigError("dense and compact models must share vocabulary and context length")
    (rd, rc), _ = _reports({"dense": dense, "compact": compact}, gen_len, batch, prompt_len, gen_prompt, reps,
                           warmup, seed, min_time)
    rc.speedup = rd.prompt_latency_ms / rc.prompt_latency_ms
    rc.throughput_increase = rc.tokens_per_second / rd.tokens_per_second
    rc.baseline = rd.baseline = "dense"
    return rd, rc


def write_bench_csv(path, reports):
    rows = [r.as_row() for r in reports]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})
