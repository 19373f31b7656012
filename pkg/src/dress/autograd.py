"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape the same functions are
plain numpy evaluations, which is how the inference paths use them.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(w, w))
    ...     tape.backward(loss)
    >>> w.grad
    array([[2., 2.],
           [2., 2.]])
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DimensionError, NumericError

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, check=True):
        arr = np.asarray(data, dtype=np.float64)
        if check and not np.isfinite(arr).all():
            raise NumericError(f"non-finite entries in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications.

    Each entry is ``(output, inputs, backward_fn)``; ``backward_fn`` maps the
    output gradient to one gradient (or ``None``) per input. Entries are
    appended as operations run, so inputs always precede their consumers.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out, inputs, backward):
        out.node = len(self.nodes)
        self.nodes.append((out, inputs, backward))

    def backward(self, loss):
        """Accumulate ``d loss / d t`` into ``t.grad`` for every recorded tensor."""
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar, got shape {loss.shape}")
        if loss.node is None:
            return
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self.nodes[: loss.node + 1]):
            if out.grad is None:
                continue
            for inp, g in zip(inputs, fn(out.grad)):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    if g.flags.owndata and g.flags.writeable and g is not out.grad:
                        inp.grad = g.reshape(inp.shape)
                    else:
                        inp.grad = np.array(g, dtype=np.float64).reshape(inp.shape)
                else:
                    inp.grad += g


def active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _sum_to(g, shape):
    """Reduce a gradient broadcast over leading axes back to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b):
    """``a @ b`` for ``(..., m, n) @ (n, k)`` or equal-batch ``(..., m, n) @ (..., n, k)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(B, -1, -2)
        if b.requires_grad:
            if B.ndim == 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _make(A @ B, (a, b), backward)


def add(a, b):
    """Elementwise sum; ``b`` may match only the trailing axes of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape[a.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add shape mismatch {a.shape} + {b.shape}")

    def backward(g):
        return g, _sum_to(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch {a.shape} * {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g * B if a.requires_grad else None), (g * A if b.requires_grad else None)

    return _make(A * B, (a, b), backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def sum_(a):
    a = as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def abs_(a):
    """``|a|`` with subgradient 0 at 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def embedding(table, ids):
    """Gather rows ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward)


def rmsnorm(x, alpha, beta, eps):
    """``alpha * x / sqrt(mean(x**2) + eps) + beta`` over the last axis."""
    x, alpha, beta = as_tensor(x), as_tensor(alpha), as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("rmsnorm over a zero-length axis")
    if alpha.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"rmsnorm gain/offset must have shape ({d},)")
    x2 = x.data.reshape(-1, d)
    y, inv = kernels.rmsnorm_fwd(x2, alpha.data, beta.data, eps)

    def backward(g):
        gx, ga, gb = kernels.rmsnorm_bwd(x2, alpha.data, inv, g.reshape(-1, d))
        return gx.reshape(x.shape), ga, gb

    return _make(y.reshape(x.shape), (x, alpha, beta), backward)


def causal_softmax(s, scale_=1.0):
    """Softmax of ``scale_ * s`` over keys, with keys after the query masked out."""
    s = as_tensor(s)
    if s.ndim < 2 or s.shape[-1] != s.shape[-2]:
        raise DimensionError(f"causal softmax needs square trailing axes, got {s.shape}")
    p = kernels.causal_softmax_fwd(s.data, scale_)
    return _make(p, (s,), lambda g: (kernels.softmax_bwd(p, g, scale_),))


def gelu(x):
    x = as_tensor(x)
    X = x.data
    y, gate = kernels.gelu_fwd(X)
    return _make(y, (x,), lambda g: (kernels.gelu_bwd(X, gate, g),))


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets``.

    Positions whose target is ``-1`` are ignored.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    t = targets.reshape(-1).astype(np.int64)
    if t.size and (t.min() < -1 or t.max() >= V):
        raise IndexError(f"target out of range [0, {V})")
    keep = np.flatnonzero(t >= 0)
    if keep.size == 0:
        raise DimensionError("cross entropy over zero positions")
    flat = logits.data.reshape(-1, V)
    dense = keep.size == t.size
    rows = flat if dense else flat[keep]
    tk = t if dense else t[keep]
    nll, probs = kernels.xent_fwd(rows, tk)
    count = keep.size

    def backward(g):
        gr = kernels.xent_bwd(probs, tk, float(g) / count)
        if dense:
            return (gr.reshape(logits.shape),)
        full = np.zeros_like(flat)
        full[keep] = gr
        return (full.reshape(logits.shape),)

    return _make(np.asarray(nll.sum() / count), (logits,), backward)


def group_norm(m, index, axis="rows", ord="l2", reduce="sum"):
    """Column-wise group norm of the slice of ``m`` selected by ``index``.

    ``axis="rows"`` restricts a matrix to rows ``index`` and takes the norm of
    each column of that slice; ``axis="columns"`` does the transpose;
    ``axis="elements"`` takes the plain vector norm of ``m[index]``.
    ``reduce="sum"`` sums the per-column norms (group lasso); ``reduce="norm"``
    takes the same norm of the vector of per-column norms instead.
    """
    m = as_tensor(m)
    index = np.asarray(index, dtype=np.int64)
    if axis == "elements":
        if m.ndim != 1:
            raise DimensionError("elements restriction needs a vector")
        sl = m.data[index][:, None]
    elif axis == "rows":
        sl = m.data[index, :]
    elif axis == "columns":
        sl = m.data[:, index].T
    else:
        raise ValueError(f"unknown axis {axis!r}")
    if ord not in ("l1", "l2"):
        raise ValueError(f"unknown norm {ord!r}")
    if index.size == 0:
        return _make(np.asarray(0.0), (m,), lambda g: (np.zeros_like(m.data),))

    if ord == "l1":
        val = np.abs(sl).sum()
        gsl = np.sign(sl)
    else:
        cols = np.sqrt((sl * sl).sum(axis=0))
        if reduce == "sum":
            val = cols.sum()
            with np.errstate(invalid="ignore", divide="ignore"):
                gsl = np.where(cols > 0, sl / np.where(cols > 0, cols, 1.0), 0.0)
        else:
            val = np.sqrt((cols * cols).sum())
            gsl = sl / val if val > 0 else np.zeros_like(sl)

    def backward(g):
        full = np.zeros_like(m.data)
        gs = gsl * float(g)
        if axis == "elements":
            full[index] = gs[:, 0]
        elif axis == "rows":
            full[index, :] = gs
        else:
            full[:, index] = gs.T
        return (full,)

    return _make(np.asarray(val), (m,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, theta, eps=1e-6, coords=None, n_coords=None, seed=0):
    """Max relative error between tape gradients and central differences.

    ``f`` maps ``theta`` (a :class:`Tensor`) to a scalar :class:`Tensor`.
    Errors are ``|g_ad - g_fd| / (|g_fd| + 1e-8)``; ``coords`` (flat indices)
    or ``n_coords`` (random sample) restrict which entries are checked.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    theta.requires_grad = True
    theta.grad = None
    with Tape() as tape:
        out = f(theta)
        tape.backward(out)
    g_ad = np.zeros(theta.data.size) if theta.grad is None else theta.grad.reshape(-1).copy()

    flat = theta.data.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
        if n_coords is not None and n_coords < flat.size:
            coords = np.random.default_rng(seed).choice(flat.size, n_coords, replace=False)
    worst = 0.0
    for i in np.asarray(coords):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar(f(theta))
        flat[i] = orig - eps
        fm = _scalar(f(theta))
        flat[i] = orig
        g_fd = (fp - fm) / (2 * eps)
        worst = max(worst, abs(g_ad[i] - g_fd) / (abs(g_fd) + 1e-8))
    return worst


def _scalar(t):
    v = float(t.data) if isinstance(t, Tensor) else float(t)
    if not np.isfinite(v):
        raise NumericError("objective is not finite")
    return v
