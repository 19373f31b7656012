"""Channel selection and the dependency closure of an embedding-channel set.

A :class:`ChannelMask` names the residual-stream channels ``K`` to be
regularized and later removed. The same ``K`` applies to every layer. The
closure maps ``K`` onto every row, column or element of the model that is
coupled to those channels: a product ``A @ B`` only stops depending on
channel ``k`` when column ``k`` of ``A`` and row ``k`` of ``B`` vanish
together, because ``A @ B`` is the sum of the rank-1 terms ``a_k b_k^T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

STRATEGIES = ("last", "first", "segmented")


def n_pruned(d, p):
    """``round(p * d)`` with halves rounded up."""
    return int(math.floor(p * d + 0.5))


@dataclass(frozen=True)
class ChannelMask:
    d: int
    K: tuple[int, ...]
    p: float
    strategy: str = "last"

    def __post_init__(self):
        idx = tuple(sorted(set(int(k) for k in self.K)))
        if any(k < 0 or k >= self.d for k in idx):
            raise DimensionError(f"channel index out of range [0, {self.d})")
        object.__setattr__(self, "K", idx)

    @property
    def index(self):
        return np.asarray(self.K, dtype=np.int64)

    @property
    def keep(self):
        """Sorted complement of ``K``."""
        mask = np.ones(self.d, dtype=bool)
        mask[list(self.K)] = False
        return np.flatnonzero(mask)

    @property
    def d_kept(self):
        return self.d - len(self.K)

    def selector(self):
        """Diagonal 0/1 vector of the selection matrix (ones at ``K``)."""
        r = np.zeros(self.d)
        r[list(self.K)] = 1.0
        return r

    @classmethod
    def empty(cls, d):
        return cls(d, (), 0.0, "last")


def select_channels(strategy, d, p, segments=5):
    """Pick ``round(p * d)`` channels.

    ``last`` and ``first`` take a contiguous block at either end;
    ``segmented`` splits ``range(d)`` into ``segments`` equal blocks and takes
    the trailing channels of each one. When ``round(p * d)`` does not split
    evenly the later segments take one extra channel each.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown selection strategy {strategy!r}")
    if not 0 <= p < 1:
        raise ConfigError(f"pruning ratio must lie in [0, 1), got {p}")
    k = n_pruned(d, p)
    if k >= d:
        raise ConfigError(f"p={p} would prune all {d} channels")
    if strategy == "last":
        K = range(d - k, d)
    elif strategy == "first":
        K = range(k)
    else:
        if segments < 1 or d % segments:
            raise ConfigError(f"{segments} segments do not divide d={d}")
        seg, base, extra = d // segments, k // segments, k % segments
        counts = [base + (s >= segments - extra) for s in range(segments)]
        if max(counts) > seg:
            raise ConfigError(f"cannot take {k} channels from {segments} segments of {seg}")
        K = [s * seg + seg - c + j for s, c in enumerate(counts) for j in range(c)]
    return ChannelMask(d, tuple(K), p, strategy)


@dataclass(frozen=True)
class ClosureEntry:
    tensor: str
    axis: str  # "rows" | "columns" | "elements"
    indices: tuple[int, ...]

    def slice_of(self, arr):
        idx = list(self.indices)
        if self.axis == "rows":
            return arr[idx, :]
        if self.axis == "columns":
            return arr[:, idx]
        return arr[idx]

    def complement_of(self, arr):
        keep = np.ones(arr.shape[0 if self.axis != "columns" else 1], dtype=bool)
        keep[list(self.indices)] = False
        if self.axis == "rows":
            return arr[keep, :]
        if self.axis == "columns":
            return arr[:, keep]
        return arr[keep]


def dependency_closure(mask: ChannelMask, config) -> list[ClosureEntry]:
    """Every slice of the model coupled to the channels in ``mask``.

    Rows of the matrices that read the residual stream (``W_Q``, ``W_K``,
    ``W_V``, ``W_up``, ``W_gate``, ``W_lm``), columns of the matrices and
    tables that write it (``W_o``, ``W_down``, ``W_emb``, ``W_pos``), and the
    matching elements of every normalization gain and offset.
    """
    if mask.d != config.d:
        raise DimensionError(f"mask is over d={mask.d}, model has d={config.d}")
    K = mask.K
    out = [ClosureEntry("W_emb", "columns", K), ClosureEntry("W_pos", "columns", K)]
    for i in range(config.layers):
        p = f"L{i}."
        out += [ClosureEntry(p + "alpha_att", "elements", K), ClosureEntry(p + "beta_att", "elements", K)]
        out += [ClosureEntry(p + n, "rows", K) for n in ("W_Q", "W_K", "W_V")]
        out.append(ClosureEntry(p + "W_o", "columns", K))
        out += [ClosureEntry(p + "alpha_ffn", "elements", K), ClosureEntry(p + "beta_ffn", "elements", K)]
        out.append(ClosureEntry(p + "W_up", "rows", K))
        if config.gated_ffn:
            out.append(ClosureEntry(p + "W_gate", "rows", K))
        out.append(ClosureEntry(p + "W_down", "columns", K))
    out += [
        ClosureEntry("alpha_f", "elements", K),
        ClosureEntry("beta_f", "elements", K),
        ClosureEntry("W_lm", "rows", K),
    ]
    return out


def rank1_sum(A, B, K=None):
    """``sum_{k in K} a_k b_k^T`` accumulated one outer product at a time."""
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DimensionError(f"shape mismatch {A.shape} @ {B.shape}")
    out = np.zeros((A.shape[0], B.shape[1]))
    for k in range(A.shape[1]) if K is None else K:
        out += np.outer(A[:, k], B[k, :])
    return out


def rank1_annihilation_check(A, B, K):
    """Max deviation of ``A@B - A_z@B_z`` from ``sum_{k in K} a_k b_k^T``.

    ``A_z`` and ``B_z`` are ``A`` and ``B`` with columns and rows ``K`` zeroed.
    """
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DimensionError(f"shape mismatch {A.shape} @ {B.shape}")
    K = sorted(set(int(k) for k in K))
    if any(k < 0 or k >= A.shape[1] for k in K):
        raise DimensionError("index outside the shared dimension")
    Az, Bz = A.copy(), B.copy()
    Az[:, K] = 0.0
    Bz[K, :] = 0.0
    lhs = A @ B - Az @ Bz
    rhs = rank1_sum(A, B, K)
    return float(np.abs(lhs - rhs).max()) if lhs.size else 0.0
