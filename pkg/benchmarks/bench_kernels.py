"""Time each kernel under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--csv out.csv]

Shapes follow one training step of the default toy model (batch 32,
sequence 64, width 64, 4 heads, FFN 256, vocabulary 256) plus one decode
step at the benchmark width. Outputs of the two backends are compared
before timing.
"""

import argparse
import csv
import statistics
import sys
import time

import numpy as np

from dress import kernels


def cases(rng):
    b, n, d, h, f, v = 32, 64, 64, 4, 256, 256
    x = rng.standard_normal((b * n, d))
    alpha, beta = rng.standard_normal(d), rng.standard_normal(d)
    y, inv = kernels.NUMPY_KERNELS["rmsnorm_fwd"](x, alpha, beta, 1e-6)
    up = rng.standard_normal((b * n, f))
    _, gate = kernels.NUMPY_KERNELS["gelu_fwd"](up)
    s = rng.standard_normal((b, h, n, n))
    p = kernels.NUMPY_KERNELS["causal_softmax_fwd"](s, 0.25)
    logits = rng.standard_normal((b * n, v))
    tgt = rng.integers(0, v, size=b * n)
    _, probs = kernels.NUMPY_KERNELS["xent_fwd"](logits, tgt)
    q = rng.standard_normal((16, 8, 64))
    kc = rng.standard_normal((16, 8, 64, 64))
    vc = rng.standard_normal((16, 8, 64, 64))
    return {
        "rmsnorm_fwd": (x, alpha, beta, 1e-6),
        "rmsnorm_bwd": (x, alpha, inv, rng.standard_normal(x.shape)),
        "gelu_fwd": (up,),
        "gelu_bwd": (up, gate, rng.standard_normal(up.shape)),
        "causal_softmax_fwd": (s, 0.25),
        "softmax_bwd": (p, rng.standard_normal(p.shape), 0.25),
        "xent_fwd": (logits, tgt),
        "xent_bwd": (probs, tgt, 1.0 / tgt.size),
        "decode_attention": (q, kc, vc, 40, 0.125),
    }


def _flat(out):
    return out if isinstance(out, tuple) else (out,)


def time_call(fn, args, repeat):
    fn(*args)
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if not hasattr(kernels, "NUMBA_KERNELS"):
        print("numba is not installed; only the numpy backend exists", file=sys.stderr)
        return 1
    rows = []
    for name, a in cases(np.random.default_rng(0)).items():
        ref = _flat(kernels.NUMPY_KERNELS[name](*a))
        got = _flat(kernels.NUMBA_KERNELS[name](*a))
        err = max(float(np.max(np.abs(np.asarray(r) - np.asarray(g)))) for r, g in zip(ref, got))
        t_np = time_call(kernels.NUMPY_KERNELS[name], a, args.repeat)
        t_nb = time_call(kernels.NUMBA_KERNELS[name], a, args.repeat)
        rows.append({"kernel": name, "numpy_ms": t_np * 1e3, "numba_ms": t_nb * 1e3,
                     "speedup": t_np / t_nb, "max_abs_diff": err})
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max diff':>11}")
    for r in rows:
        print(f"{r['kernel']:<20}{r['numpy_ms']:>10.3f}{r['numba_ms']:>10.3f}{r['speedup']:>9.2f}{r['max_abs_diff']:>11.1e}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
