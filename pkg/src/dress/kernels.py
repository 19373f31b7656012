"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is fixed at import time. Set ``DRESS_NUMBA=0`` to force the
numpy implementations (for example to compare the two, or on a machine
without numba). Both backends are deterministic and agree to rounding.

All kernels take and return contiguous float64 arrays; the row-wise
kernels operate on the last axis of a 2-D view.
"""

import math
import os

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715

try:
    import numba
except ImportError:  # pragma: no cover - numba is optional
    numba = None

BACKEND = "numba" if numba is not None and os.environ.get("DRESS_NUMBA", "1") != "0" else "numpy"


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def _np_rmsnorm_fwd(x, alpha, beta, eps):
    d = x.shape[1]
    inv = 1.0 / np.sqrt((x * x).sum(axis=1) / d + eps)
    y = x * inv[:, None] * alpha + beta
    return y, inv


def _np_rmsnorm_bwd(x, alpha, inv, gy):
    d = x.shape[1]
    xhat = x * inv[:, None]
    galpha = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    gxhat = gy * alpha
    dot = (gxhat * xhat).sum(axis=1)
    gx = inv[:, None] * (gxhat - xhat * (dot / d)[:, None])
    return gx, galpha, gbeta


def _np_gelu_fwd(x):
    # 0.5 * (1 + tanh(u)) == sigmoid(2u); returns (y, sigmoid(2u))
    u = x * x
    u *= GELU_K
    u += 1.0
    u *= x
    u *= -2.0 * GELU_C
    np.exp(u, out=u)
    u += 1.0
    s = np.reciprocal(u, out=u)
    return x * s, s


def _np_gelu_bwd(x, s, gy):
    # d/dx [x s] = s + 2 x s (1 - s) du/dx,  du/dx = C (1 + 3 K x^2)
    du = x * x
    du *= 3.0 * GELU_K * 2.0 * GELU_C
    du += 2.0 * GELU_C
    du *= x
    du *= 1.0 - s
    du += 1.0
    du *= s
    du *= gy
    return du


def _np_causal_softmax_fwd(s, scale):
    n = s.shape[-1]
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    z = np.where(mask, -np.inf, s * scale)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _np_softmax_bwd(p, gp, scale):
    dot = (gp * p).sum(axis=-1, keepdims=True)
    return scale * p * (gp - dot)


def _np_xent_fwd(logits, targets):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    nll = (np.log(z[:, 0]) + m[:, 0]) - logits[np.arange(logits.shape[0]), targets]
    return nll, probs


def _np_xent_bwd(probs, targets, scale):
    g = probs * scale
    g[np.arange(probs.shape[0]), targets] -= scale
    return g


def _np_decode_attention(q, kc, vc, t, scale):
    # q: (B, h, dh); kc, vc: (B, h, T, dh); attends to positions [0, t]
    s = np.einsum("bhd,bhtd->bht", q, kc[:, :, : t + 1]) * scale
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    return np.einsum("bht,bhtd->bhd", p, vc[:, :, : t + 1])


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if numba is not None:
    njit = numba.njit(cache=True, nogil=True, error_model="numpy")

    @njit
    def _nb_rmsnorm_fwd(x, alpha, beta, eps):
        rows, d = x.shape
        y = np.empty_like(x)
        inv = np.empty(rows)
        for r in range(rows):
            acc = 0.0
            for j in range(d):
                acc += x[r, j] * x[r, j]
            iv = 1.0 / math.sqrt(acc / d + eps)
            inv[r] = iv
            for j in range(d):
                y[r, j] = x[r, j] * iv * alpha[j] + beta[j]
        return y, inv

    @njit
    def _nb_rmsnorm_bwd(x, alpha, inv, gy):
        rows, d = x.shape
        gx = np.empty_like(x)
        galpha = np.zeros(d)
        gbeta = np.zeros(d)
        for r in range(rows):
            iv = inv[r]
            dot = 0.0
            for j in range(d):
                xh = x[r, j] * iv
                galpha[j] += gy[r, j] * xh
                gbeta[j] += gy[r, j]
                dot += gy[r, j] * alpha[j] * xh
            dot /= d
            for j in range(d):
                gx[r, j] = iv * (gy[r, j] * alpha[j] - x[r, j] * iv * dot)
        return gx, galpha, gbeta

    @njit
    def _nb_gelu_fwd(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        sig = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            s = 1.0 / (1.0 + math.exp(-2.0 * GELU_C * (v + GELU_K * v * v * v)))
            sig[i] = s
            out[i] = v * s
        return out.reshape(x.shape), sig.reshape(x.shape)

    @njit
    def _nb_gelu_bwd(x, s, gy):
        flat = x.ravel()
        sf = s.ravel()
        g = gy.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            si = sf[i]
            du = 2.0 * GELU_C * (1.0 + 3.0 * GELU_K * v * v)
            out[i] = g[i] * si * (1.0 + v * (1.0 - si) * du)
        return out.reshape(x.shape)

    @njit
    def _nb_causal_softmax_fwd(s, scale):
        batch, n, _ = s.shape
        p = np.zeros_like(s)
        for b in range(batch):
            for i in range(n):
                m = -np.inf
                for j in range(i + 1):
                    v = s[b, i, j] * scale
                    if v > m:
                        m = v
                tot = 0.0
                for j in range(i + 1):
                    e = math.exp(s[b, i, j] * scale - m)
                    p[b, i, j] = e
                    tot += e
                for j in range(i + 1):
                    p[b, i, j] /= tot
        return p

    @njit
    def _nb_softmax_bwd(p, gp, scale):
        batch, n, m = p.shape
        gs = np.empty_like(p)
        for b in range(batch):
            for i in range(n):
                dot = 0.0
                for j in range(m):
                    dot += gp[b, i, j] * p[b, i, j]
                for j in range(m):
                    gs[b, i, j] = scale * p[b, i, j] * (gp[b, i, j] - dot)
        return gs

    @njit
    def _nb_xent_fwd(logits, targets):
        rows, v = logits.shape
        probs = np.empty_like(logits)
        nll = np.empty(rows)
        for r in range(rows):
            m = logits[r, 0]
            for j in range(1, v):
                if logits[r, j] > m:
                    m = logits[r, j]
            tot = 0.0
            for j in range(v):
                e = math.exp(logits[r, j] - m)
                probs[r, j] = e
                tot += e
            for j in range(v):
                probs[r, j] /= tot
            nll[r] = math.log(tot) + m - logits[r, targets[r]]
        return nll, probs

    @njit
    def _nb_xent_bwd(probs, targets, scale):
        g = probs * scale
        for r in range(probs.shape[0]):
            g[r, targets[r]] -= scale
        return g

    @njit
    def _nb_decode_attention(q, kc, vc, t, scale):
        batch, heads, dh = q.shape
        out = np.zeros((batch, heads, dh))
        w = np.empty(t + 1)
        for b in range(batch):
            for h in range(heads):
                m = -np.inf
                for j in range(t + 1):
                    acc = 0.0
                    for k in range(dh):
                        acc += q[b, h, k] * kc[b, h, j, k]
                    acc *= scale
                    w[j] = acc
                    if acc > m:
                        m = acc
                tot = 0.0
                for j in range(t + 1):
                    w[j] = math.exp(w[j] - m)
                    tot += w[j]
                for j in range(t + 1):
                    pj = w[j] / tot
                    for k in range(dh):
                        out[b, h, k] += pj * vc[b, h, j, k]
        return out


def _three_d(s):
    return s.reshape(-1, s.shape[-2], s.shape[-1])


def rmsnorm_fwd(x, alpha, beta, eps):
    """Row-wise RMS normalization of a 2-D array; returns ``(y, 1/rms)``."""
    if BACKEND == "numba":
        return _nb_rmsnorm_fwd(np.ascontiguousarray(x), alpha, beta, float(eps))
    return _np_rmsnorm_fwd(x, alpha, beta, eps)


def rmsnorm_bwd(x, alpha, inv, gy):
    if BACKEND == "numba":
        return _nb_rmsnorm_bwd(np.ascontiguousarray(x), alpha, inv, np.ascontiguousarray(gy))
    return _np_rmsnorm_bwd(x, alpha, inv, gy)


def gelu_fwd(x):
    """Tanh-approximated GELU; returns ``(y, gate)`` with the gate kept for backward."""
    if BACKEND == "numba":
        return _nb_gelu_fwd(np.ascontiguousarray(x))
    return _np_gelu_fwd(x)


def gelu_bwd(x, gate, gy):
    if BACKEND == "numba":
        return _nb_gelu_bwd(np.ascontiguousarray(x), gate, np.ascontiguousarray(gy))
    return _np_gelu_bwd(x, gate, gy)


def causal_softmax_fwd(s, scale):
    """Softmax of ``scale * s`` over the last axis with future keys masked.

    ``s`` has shape ``(..., n, n)``; masked probabilities are exactly zero.
    """
    if BACKEND == "numba":
        return _nb_causal_softmax_fwd(np.ascontiguousarray(_three_d(s)), float(scale)).reshape(s.shape)
    return _np_causal_softmax_fwd(s, scale)


def softmax_bwd(p, gp, scale):
    if BACKEND == "numba":
        out = _nb_softmax_bwd(
            np.ascontiguousarray(_three_d(p)), np.ascontiguousarray(_three_d(gp)), float(scale)
        )
        return out.reshape(p.shape)
    return _np_softmax_bwd(p, gp, scale)


def xent_fwd(logits, targets):
    """Per-row negative log-likelihood and softmax probabilities."""
    if BACKEND == "numba":
        return _nb_xent_fwd(np.ascontiguousarray(logits), np.ascontiguousarray(targets, dtype=np.int64))
    return _np_xent_fwd(logits, targets)


def xent_bwd(probs, targets, scale):
    if BACKEND == "numba":
        return _nb_xent_bwd(probs, np.ascontiguousarray(targets, dtype=np.int64), float(scale))
    return _np_xent_bwd(probs, targets, scale)


def decode_attention(q, kc, vc, t, scale):
    """Single-position attention over a key/value cache filled up to ``t``."""
    if BACKEND == "numba":
        return _nb_decode_attention(
            np.ascontiguousarray(q), kc, vc, int(t), float(scale)
        )
    return _np_decode_attention(q, kc, vc, t, scale)


NUMPY_KERNELS = {
    "rmsnorm_fwd": _np_rmsnorm_fwd,
    "rmsnorm_bwd": _np_rmsnorm_bwd,
    "gelu_fwd": _np_gelu_fwd,
    "gelu_bwd": _np_gelu_bwd,
    "causal_softmax_fwd": _np_causal_softmax_fwd,
    "softmax_bwd": _np_softmax_bwd,
    "xent_fwd": _np_xent_fwd,
    "xent_bwd": _np_xent_bwd,
    "decode_attention": _np_decode_attention,
}

if numba is not None:
    NUMBA_KERNELS = {
        "rmsnorm_fwd": _nb_rmsnorm_fwd,
        "rmsnorm_bwd": _nb_rmsnorm_bwd,
        "gelu_fwd": _nb_gelu_fwd,
        "gelu_bwd": _nb_gelu_bwd,
        "causal_softmax_fwd": lambda s, scale: _nb_causal_softmax_fwd(_three_d(s), scale).reshape(s.shape),
        "softmax_bwd": lambda p, gp, scale: _nb_softmax_bwd(_three_d(p), _three_d(gp), scale).reshape(p.shape),
        "xent_fwd": _nb_xent_fwd,
        "xent_bwd": _nb_xent_bwd,
        "decode_attention": _nb_decode_attention,
    }
else:  # pragma: no cover
    NUMBA_KERNELS = {}
