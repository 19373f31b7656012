"""Command-line entry point: ``dress <command> [--config FILE] [--key value ...]``.

Every :class:`~dress.pipeline.PipelineConfig` field is accepted as a flag
and overrides the config file. Booleans take a value (``--rft false``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .bench import bench as run_bench
from .bench import write_bench_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DressError
from .evaluation import mass_ratios, perplexity, write_eval_csv
from .model import init_model
from .pipeline import AXES, FIELDS, ablate, dump_config, load_config, prepare_data, run_dress
from .pruner import apply_mask, compact, slice_mass
from .regularizer import regularize
from .rft import attach_adapters, rft_train
from .train import train_base

COMMANDS = ("train-base", "regularize", "prune", "rft", "eval", "bench", "run", "ablate", "report")
NEEDS_CKPT = ("regularize", "prune", "rft", "eval")


def _parser():
    ap = argparse.ArgumentParser(prog="dress", description="channel regularization, pruning and recovery")
    ap.add_argument("--version", action="version", version=f"dress {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat 'key = value' config file")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in NEEDS_CKPT:
            sp.add_argument("--ckpt", required=True, help="input checkpoint")
        if name == "bench":
            sp.add_argument("--dense", help="dense checkpoint (default: fresh init from the config)")
            sp.add_argument("--compact", help="compact checkpoint (default: prune the dense model at p)")
        if name == "ablate":
            sp.add_argument("--axis", required=True, choices=AXES)
            sp.add_argument("--values", help="comma-separated sweep values (default: the axis grid)")
        if name == "report":
            sp.add_argument("--run", required=True, help="run or sweep directory holding CSV reports")
        group = sp.add_argument_group("config overrides")
        for key in FIELDS:
            group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", default=argparse.SUPPRESS,
                               metavar="VALUE", required=(name == "run" and key in ("seed", "out", "corpus")))
    return ap


def _config(args):
    overrides = [(k[4:], v) for k, v in vars(args).items() if k.startswith("cfg_")]
    return load_config(args.config, overrides)


def _out(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    return out


def cmd_train_base(args, cfg):
    out = _out(cfg)
    data = prepare_data(cfg)
    params, report = train_base(init_model(cfg.model_config()), data.train, cfg.train_config())
    save_checkpoint(params, out / "init.drss", "init")
    report.write_csv(out / "train.csv")
    ev = perplexity(params, data.heldout, cfg.n_max)
    write_eval_csv(out / "eval.csv", {"init": ev})
    return {"checkpoint": str(out / "init.drss"), "perplexity": ev.perplexity}


def cmd_regularize(args, cfg):
    out = _out(cfg)
    params, _, _ = load_checkpoint(args.ckpt)
    data = prepare_data(cfg)
    mask = cfg.mask()
    reg, report = regularize(params, data.X1, mask, cfg.reg_config())
    save_checkpoint(reg, out / "regularized.drss", "regularized", mask)
    report.write_csv(out / "reg.csv")
    mr = mass_ratios(params, reg, mask, probe=data.probe)
    mr.write_csv(out / "mass_ratios.csv")
    return {"checkpoint": str(out / "regularized.drss"),
            "mean_preserved_ratio": mr.mean("preserved_ratio", "matrix"),
            "mean_increased_ratio": mr.mean("increased_ratio", "matrix")}


def cmd_prune(args, cfg):
    out = _out(cfg)
    params, _, stored = load_checkpoint(args.ckpt)
    mask = stored or cfg.mask()
    mass = slice_mass(params, mask) if mask.K else {}
    masked = apply_mask(params, mask)
    compacted, report = compact(masked, mask, residual_mass=max(mass.values(), default=0.0))
    save_checkpoint(masked, out / "masked.drss", "masked", mask)
    save_checkpoint(compacted, out / "compacted.drss", "compacted", mask)
    (out / "prune.json").write_text(report.to_json(), encoding="utf-8")
    return {"checkpoint": str(out / "compacted.drss"), "d_kept": report.d_kept,
            "achieved_ratio": report.achieved_ratio}


def cmd_rft(args, cfg):
    out = _out(cfg)
    params, _, mask = load_checkpoint(args.ckpt)
    data = prepare_data(cfg)
    acfg = cfg.adapter_config()
    merged, trail, _ = rft_train(attach_adapters(params, acfg), data.X2, acfg, X1=data.X1)
    save_checkpoint(merged, out / "rft.drss", "rft", mask)
    trail.write_csv(out / "rft.csv")
    return {"checkpoint": str(out / "rft.drss"), "final_lm": trail.rows[-1]["lm"] if trail.rows else None}


def cmd_eval(args, cfg):
    out = _out(cfg)
    params, stage, _ = load_checkpoint(args.ckpt)
    data = prepare_data(cfg)
    ev = perplexity(params, data.heldout, params.config.n_max)
    write_eval_csv(out / "eval.csv", {stage: ev})
    return {"stage": stage, "perplexity": ev.perplexity, "tokens": ev.tokens}


def cmd_bench(args, cfg):
    from .pruner import prune

    out = _out(cfg)
    dense = load_checkpoint(args.dense)[0] if args.dense else init_model(cfg.model_config())
    comp = load_checkpoint(args.compact)[0] if args.compact else prune(dense, cfg.mask())[0]
    rd, rc = run_bench(dense, comp, gen_len=cfg.bench_gen_len, batch=cfg.bench_batch, reps=cfg.bench_reps)
    write_bench_csv(out / "bench.csv", [rd, rc])
    return {"tokens_per_second_ratio": rc.throughput_increase, "prompt_speedup": rc.speedup}


def cmd_run(args, cfg):
    res = run_dress(cfg)
    return {"out": str(res.out), "stages": res.stages, "perplexity": res.perplexity,
            "baseline_perplexity": res.baseline_perplexity}


def cmd_ablate(args, cfg):
    values = [v.strip() for v in args.values.split(",")] if args.values else None
    rows = ablate(cfg, args.axis, values)
    return {"csv": str(Path(cfg.out) / f"ablate_{args.axis}.csv"), "points": len(rows),
            "failed": sum(r["status"] != "ok" for r in rows)}


def cmd_report(args, cfg):
    from .plots import plot_mass_ratios, plot_sweep

    run = Path(args.run)
    made = []
    for csv_path in sorted(run.rglob("mass_ratios.csv")):
        made.append(plot_mass_ratios(csv_path, csv_path.with_name("mass_ratios.png")))
    for csv_path in sorted(run.glob("ablate_*.csv")):
        made.append(plot_sweep(csv_path, csv_path.with_suffix(".png")))
    if not made:
        raise DressError(f"no mass_ratios.csv or ablate_*.csv under {run}")
    return {"plots": [str(p) for p in made]}


HANDLERS = {
    "train-base": cmd_train_base, "regularize": cmd_regularize, "prune": cmd_prune, "rft": cmd_rft,
    "eval": cmd_eval, "bench": cmd_bench, "run": cmd_run, "ablate": cmd_ablate, "report": cmd_report,
}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        summary = HANDLERS[args.command](args, cfg)
    except (DressError, OSError) as exc:
        print(f"dress {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
