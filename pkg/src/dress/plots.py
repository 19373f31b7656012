"""Render report CSVs to image files (needs the optional matplotlib extra)."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("plotting needs matplotlib; install the 'plots' extra") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _float(s):
    try:
        return float(s)
    except ValueError:
        return math.nan


def plot_mass_ratios(csv_path, out_path):
    """Mean preserved and increased ratio per layer, matrices and activations as separate lines."""
    series = defaultdict(lambda: defaultdict(list))
    with open(csv_path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            kind = "activation" if row["tensor"] == "activation" else "weights"
            v = _float(row["ratio"])
            if not math.isnan(v):
                series[(kind, row["slice"])][int(row["layer"])].append(v)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for (kind, sl), by_layer in sorted(series.items()):
        layers = sorted(by_layer)
        ax.plot(layers, [sum(by_layer[i]) / len(by_layer[i]) for i in layers], marker="o", label=f"{kind}, {sl}")
    ax.axhline(1.0, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("layer (-1: embedding / head)")
    ax.set_ylabel("mass after / before")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_sweep(csv_path, out_path):
    """Perplexity against the swept value of an ablation CSV."""
    xs, ys, axis = [], [], ""
    with open(csv_path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["status"] != "ok":
                continue
            axis = row["axis"]
            xs.append(row["value"])
            ys.append(_float(row["perplexity"]))
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    numeric = all(not math.isnan(_float(x)) for x in xs)
    pos = [float(x) for x in xs] if numeric else list(range(len(xs)))
    ax.plot(pos, ys, marker="o")
    if not numeric:
        ax.set_xticks(pos, xs, rotation=30)
    if axis == "lam":
        ax.set_xscale("log")
    ax.set_xlabel(axis or "value")
    ax.set_ylabel("perplexity")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)
