"""End-to-end driver: select, regularize, prune, recover, evaluate.

A run writes into one output directory::

    init.drss regularized.drss masked.drss compacted.drss rft.drss
    train.csv reg.csv rft.csv prune.json eval.csv mass_ratios.csv probe.npy
    bench.csv timings.json manifest.json

Only the stages enabled by the toggles produce their files. Every stage is
a pure function of its input model and the config, so stage results can be
shared through an in-memory ``cache`` (used by :func:`ablate`).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .bench import bench as run_bench
from .bench import write_bench_csv
from .channels import select_channels
from .checkpoint import load_checkpoint, save_checkpoint
from .data import eval_windows, ingest_corpus, parse_ratio, split_data, synthetic_corpus
from .errors import ConfigError, DataError
from .evaluation import mass_ratios, perplexity, write_eval_csv
from .model import ModelConfig, init_model
from .pruner import apply_mask, compact, equivalence_check, slice_mass
from .regularizer import RegConfig, regularize
from .rft import AdapterConfig, attach_adapters, rft_train
from .train import TrainConfig, train_base

log = logging.getLogger(__name__)

WINDOW_POLICY = "non-overlapping windows at multiples of n_max, chosen by a seeded permutation"

# (regularize, prune, rft) for every combination, named as R/N, P/N, R/N.
STAGE_CASES = {
    "N&N&N": (False, False, False),
    "R&N&N": (True, False, False),
    "N&P&N": (False, True, False),
    "N&N&R": (False, False, True),
    "R&P&N": (True, True, False),
    "R&N&R": (True, False, True),
    "N&P&R": (False, True, True),
    "R&P&R": (True, True, True),
}


@dataclass
class PipelineConfig:
    # model
    d: int = 64
    d1: int = 64
    d2: int = 256
    layers: int = 2
    vocab: int = 256
    n_max: int = 64
    heads: int = 4
    gated_ffn: bool = False
    eps: float = 1e-6
    # base model: a checkpoint path, or trained from scratch for base_steps
    base: str = ""
    base_steps: int = 1500
    base_lr: float = 3e-3
    base_batch: int = 32
    # regularization
    lam: float = 1e-3
    norm: str = "l2"
    reduce: str = "sum"
    reg_steps: int = 300
    reg_lr: float = 1.0
    reg_batch: int = 32
    reg_clip: float = 0.25
    patience: int = 0
    # recovery fine-tuning
    rank: int = 4
    adapter_scale: float = 10.0
    rft_steps: int = 200
    rft_lr: float = 0.1
    rft_batch: int = 32
    # channels and data
    p: float = 0.25
    strategy: str = "last"
    segments: int = 4
    split_ratio: str = "3:1"
    sample_count: int = 1000
    corpus: str = "synthetic:0"
    holdout: float = 0.1
    probe_size: int = 8
    # stage toggles
    regularize: bool = True
    prune: bool = True
    rft: bool = True
    # benchmark
    bench: bool = False
    bench_gen_len: int = 48
    bench_batch: int = 16
    bench_reps: int = 5
    # run
    out: str = "runs/dress"
    seed: int = 0

    def __post_init__(self):
        parse_ratio(self.split_ratio)
        if not 0 < self.holdout < 1:
            raise ConfigError("holdout must lie in (0, 1)")
        if self.rft and parse_ratio(self.split_ratio) == 1:
            raise ConfigError("split ratio leaves no fine-tuning data; disable rft")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @property
    def seeds(self):
        s = self.seed
        return {"model": s, "base": s + 1, "split": s + 2, "reg": s + 3, "rft": s + 4, "probe": s + 5}

    def model_config(self):
        return ModelConfig(self.d, self.d1, self.d2, self.layers, self.vocab, self.n_max, self.heads,
                           self.gated_ffn, self.eps, self.seeds["model"])

    def train_config(self):
        return TrainConfig(steps=self.base_steps, lr=self.base_lr, batch_size=self.base_batch, seed=self.seeds["base"])

    def reg_config(self):
        return RegConfig(lam=self.lam, norm=self.norm, steps=self.reg_steps, lr=self.reg_lr,
                         batch_size=self.reg_batch, seed=self.seeds["reg"], reduce=self.reduce,
                         patience=self.patience, clip=self.reg_clip)

    def adapter_config(self):
        return AdapterConfig(rank=self.rank, scale=self.adapter_scale, steps=self.rft_steps, lr=self.rft_lr,
                             batch_size=self.rft_batch, seed=self.seeds["rft"])

    def mask(self):
        return select_channels(self.strategy, self.d, self.p, self.segments)

    def fingerprint(self, *names):
        return json.dumps({n: getattr(self, n) for n in names}, sort_keys=True)


MODEL_KEYS = ("d", "d1", "d2", "layers", "vocab", "n_max", "heads", "gated_ffn", "eps")
DATA_KEYS = ("corpus", "holdout", "sample_count", "n_max", "split_ratio", "seed")
BASE_KEYS = MODEL_KEYS + ("base", "base_steps", "base_lr", "base_batch", "corpus", "holdout", "seed")
MASK_KEYS = ("p", "strategy", "segments")
REG_KEYS = ("lam", "norm", "reduce", "reg_steps", "reg_lr", "reg_batch", "reg_clip", "patience")
RFT_KEYS = ("rank", "adapter_scale", "rft_steps", "rft_lr", "rft_batch")


# config files -------------------------------------------------------------

def _coerce(field, raw):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if kind == "bool":
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{field.name}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{field.name}: cannot parse {raw!r} as {kind}") from exc
    return str(raw)


FIELDS = {f.name: f for f in fields(PipelineConfig)}


def config_from_pairs(pairs, base=None):
    """Apply ``(key, raw_value)`` pairs on top of ``base`` (or the defaults)."""
    values = (base or PipelineConfig()).to_dict()
    for key, raw in pairs:
        key = key.replace("-", "_")
        if key not in FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(FIELDS[key], raw)
    return PipelineConfig(**values)


def parse_config_text(text):
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path, overrides=(), base=None):
    pairs = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else []
    return config_from_pairs(list(pairs) + list(overrides), base)


def dump_config(cfg: PipelineConfig):
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


# data -------------------------------------------------------------------

def load_corpus(spec):
    """``synthetic[:seed[:bytes]]`` or comma-separated file/directory paths."""
    if spec.startswith("synthetic"):
        parts = spec.split(":")
        seed = int(parts[1]) if len(parts) > 1 and parts[1] else 0
        n = int(parts[2]) if len(parts) > 2 else 500_000
        return synthetic_corpus(n, seed)
    return ingest_corpus([p for p in spec.split(",") if p])


@dataclass
class RunData:
    train: np.ndarray
    heldout: np.ndarray
    X1: np.ndarray
    X2: np.ndarray
    offsets1: np.ndarray
    offsets2: np.ndarray
    probe: np.ndarray


def prepare_data(cfg: PipelineConfig) -> RunData:
    corpus = load_corpus(cfg.corpus)
    tr, ho = corpus.split_holdout(cfg.holdout)
    sp = split_data(tr.tokens, cfg.sample_count, cfg.n_max, cfg.split_ratio, cfg.seeds["split"])
    windows = eval_windows(ho.tokens, cfg.n_max)
    rng = np.random.default_rng(cfg.seeds["probe"])
    probe = windows[np.sort(rng.choice(len(windows), size=min(cfg.probe_size, len(windows)), replace=False))]
    return RunData(tr.tokens, ho.tokens, sp.X1, sp.X2, sp.offsets1, sp.offsets2, probe)


# stages -----------------------------------------------------------------

def _memo(cache, key, fn):
    if cache is None:
        return fn()
    if key not in cache:
        cache[key] = fn()
    return cache[key]


def stage_init(cfg, data, cache=None):
    def run():
        if cfg.base:
            params, _, _ = load_checkpoint(cfg.base)
            return params, None
        params = init_model(cfg.model_config())
        if cfg.base_steps == 0:
            return params, None
        return train_base(params, data.train, cfg.train_config())

    return _memo(cache, ("init", cfg.fingerprint(*BASE_KEYS)), run)


def stage_regularize(params, cfg, data, key, cache=None):
    return _memo(cache, ("reg", key, cfg.fingerprint(*DATA_KEYS, *MASK_KEYS, *REG_KEYS)),
                 lambda: regularize(params, data.X1, cfg.mask(), cfg.reg_config()))


def stage_prune(params, cfg, key, cache=None):
    def run():
        mask = cfg.mask()
        mass = slice_mass(params, mask) if mask.K else {}
        masked = apply_mask(params, mask)
        compacted, report = compact(masked, mask, residual_mass=max(mass.values(), default=0.0))
        return masked, compacted, report

    return _memo(cache, ("prune", key, cfg.fingerprint(*MASK_KEYS)), run)


def stage_rft(params, cfg, data, key, cache=None):
    def run():
        if len(data.X2) == 0:
            raise DataError("fine-tuning split X2 is empty; disable rft or change split_ratio")
        acfg = cfg.adapter_config()
        merged, trail, _ = rft_train(attach_adapters(params, acfg), data.X2, acfg, X1=data.X1)
        return merged, trail

    return _memo(cache, ("rft", key, cfg.fingerprint(*DATA_KEYS, *RFT_KEYS)), run)


# driver -----------------------------------------------------------------

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunResult:
    out: Path
    stages: list
    perplexity: float
    baseline_perplexity: float
    final: object
    mass: object = None
    bench: object = None
    manifest: dict = None


def run_dress(cfg: PipelineConfig, cache=None, data=None) -> RunResult:
    """Run the enabled stages in order, writing checkpoints and reports to ``cfg.out``.

    On failure the files written so far stay in place and the manifest records
    the error before it is re-raised.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    timings = {}
    manifest = {
        "config": cfg.to_dict(),
        "seeds": cfg.seeds,
        "window_policy": WINDOW_POLICY,
        "stages": [],
        "status": "running",
    }
    result = RunResult(out, manifest["stages"], math.nan, math.nan, None, manifest=manifest)

    def clock(name, t0):
        timings[name] = time.perf_counter() - t0

    try:
        t0 = time.perf_counter()
        data = data or prepare_data(cfg)
        np.save(out / "probe.npy", data.probe)
        manifest["data"] = {"X1": int(len(data.X1)), "X2": int(len(data.X2)),
                            "heldout_tokens": int(data.heldout.size)}
        base, train_report = stage_init(cfg, data, cache)
        key = ("init", cfg.fingerprint(*BASE_KEYS))
        save_checkpoint(base, out / "init.drss", "init")
        if train_report is not None:
            train_report.write_csv(out / "train.csv")
        manifest["stages"].append("init")
        clock("init", t0)
        current, mask = base, cfg.mask()
        evals = {"init": perplexity(base, data.heldout, cfg.n_max)}

        if cfg.regularize:
            t0 = time.perf_counter()
            current, reg_report = stage_regularize(current, cfg, data, key, cache)
            key = ("reg", key, cfg.fingerprint(*DATA_KEYS, *MASK_KEYS, *REG_KEYS))
            save_checkpoint(current, out / "regularized.drss", "regularized", mask)
            reg_report.write_csv(out / "reg.csv")
            result.mass = mass_ratios(base, current, mask, probe=data.probe)
            result.mass.write_csv(out / "mass_ratios.csv")
            manifest["stages"].append("regularized")
            clock("regularize", t0)

        if cfg.prune:
            t0 = time.perf_counter()
            masked, current, prune_report = stage_prune(current, cfg, key, cache)
            key = ("prune", key, cfg.fingerprint(*MASK_KEYS))
            save_checkpoint(masked, out / "masked.drss", "masked", mask)
            save_checkpoint(current, out / "compacted.drss", "compacted", mask)
            worst, ok = equivalence_check(masked, current, [data.probe])
            info = json.loads(prune_report.to_json())
            info["equivalence_max_abs"] = worst
            info["equivalence_ok"] = bool(ok)
            (out / "prune.json").write_text(json.dumps(info, indent=2, sort_keys=True), encoding="utf-8")
            manifest["stages"] += ["masked", "compacted"]
            clock("prune", t0)

        if cfg.rft:
            t0 = time.perf_counter()
            current, trail = stage_rft(current, cfg, data, key, cache)
            save_checkpoint(current, out / "rft.drss", "rft", mask if cfg.prune else None)
            trail.write_csv(out / "rft.csv")
            manifest["stages"].append("rft")
            clock("rft", t0)

        t0 = time.perf_counter()
        evals["final"] = perplexity(current, data.heldout, cfg.n_max)
        write_eval_csv(out / "eval.csv", evals)
        clock("eval", t0)
        result.final = current
        result.perplexity = evals["final"].perplexity
        result.baseline_perplexity = evals["init"].perplexity

        if cfg.bench:
            t0 = time.perf_counter()
            rd, rc = run_bench(base, current, gen_len=cfg.bench_gen_len, batch=cfg.bench_batch, reps=cfg.bench_reps)
            write_bench_csv(out / "bench.csv", [rd, rc])
            result.bench = rc
            clock("bench", t0)
        manifest["status"] = "ok"
    except Exception as exc:
        manifest["status"] = "error"
        manifest["error"] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        raise
    finally:
        (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True), encoding="utf-8")
        manifest["results"] = {"perplexity": result.perplexity, "baseline_perplexity": result.baseline_perplexity}
        manifest["files"] = {
            p.name: _sha256(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return result


# sweeps -----------------------------------------------------------------

LAMBDA_GRID = (1e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 1e-1)
P_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
AXES = ("stages", "lam", "p", "strategy", "split_ratio", "sample_count")
ABLATE_COLUMNS = ("axis", "value", "status", "perplexity", "baseline_perplexity", "mean_preserved_ratio",
                  "mean_increased_ratio", "speedup", "error")


def sweep_points(axis, values=None):
    """``[(label, overrides)]`` for one sweep axis."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    if axis == "stages":
        names = values or list(STAGE_CASES)
        unknown = [n for n in names if n not in STAGE_CASES]
        if unknown:
            raise ConfigError(f"unknown cases {unknown}; choose from {list(STAGE_CASES)}")
        return [(n, dict(zip(("regularize", "prune", "rft"), STAGE_CASES[n]))) for n in names]
    if values is None:
        values = {"lam": LAMBDA_GRID, "p": P_GRID, "strategy": ("last", "first", "segmented"),
                  "split_ratio": ("1:1", "3:1", "7:1"), "sample_count": (250, 500, 1000)}[axis]
    field = FIELDS[axis]
    return [(str(v), {axis: _coerce(field, v)}) for v in values]


def ablate(base: PipelineConfig, axis, values=None, cache=None):
    """Run one pipeline per sweep point under ``base.out``; return the CSV rows.

    A failing point becomes a row with ``status=error`` and the sweep goes on.
    """
    cache = {} if cache is None else cache
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, changes in sweep_points(axis, values):
        row = dict.fromkeys(ABLATE_COLUMNS, "")
        row.update(axis=axis, value=label)
        try:
            cfg = base.replace(out=str(out / f"{axis}={label}"), **changes)
            res = run_dress(cfg, cache=cache)
        except Exception as exc:  # noqa: BLE001 - sweep records and continues
            log.warning("sweep point %s=%s failed: %s", axis, label, exc)
            row.update(status="error", error=f"{type(exc).__name__}: {exc}")
        else:
            row.update(status="ok", perplexity=res.perplexity, baseline_perplexity=res.baseline_perplexity)
            if res.mass is not None:
                row["mean_preserved_ratio"] = res.mass.mean("preserved_ratio", "matrix")
                row["mean_increased_ratio"] = res.mass.mean("increased_ratio", "matrix")
            if res.bench is not None:
                row["speedup"] = res.bench.speedup
        rows.append(row)
    write_ablation_csv(out / f"ablate_{axis}.csv", rows)
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})
