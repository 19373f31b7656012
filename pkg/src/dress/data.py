"""Byte-level corpora, a seeded synthetic text generator, and data splits."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class Corpus:
    tokens: np.ndarray
    sources: list[str] = field(default_factory=list)

    @property
    def total_tokens(self):
        return int(self.tokens.size)

    def to_bytes(self):
        return self.tokens.astype(np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, raw, sources=()):
        return cls(np.frombuffer(raw, dtype=np.uint8).astype(np.int64), list(sources))

    def split_holdout(self, fraction):
        """``(train, heldout)`` with the trailing ``fraction`` held out."""
        cut = int(round(self.total_tokens * (1.0 - fraction)))
        return Corpus(self.tokens[:cut], self.sources), Corpus(self.tokens[cut:], self.sources)


def _expand(paths):
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files += [q for q in p.rglob("*") if q.is_file()]
        else:
            files.append(p)
    return sorted(files, key=lambda q: str(q))


def ingest_corpus(paths) -> Corpus:
    """Concatenate the bytes of ``paths`` (directories expand recursively) in sorted order."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    files = _expand(paths)
    raw = b"".join(f.read_bytes() for f in files)
    if not raw:
        raise DataError(f"no bytes read from {[str(p) for p in paths]}")
    return Corpus.from_bytes(raw, [str(f) for f in files])


_ONSETS = ["b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
           "br", "ch", "st", "th", "tr", "pl", "gr", "sh"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ea"]
_CODAS = ["", "", "", "n", "r", "s", "t", "l", "nd", "st"]


def synthetic_text(n_bytes=500_000, seed=0, n_words=400, fanout=6):
    """Seeded word-level Markov text rendered to ASCII.

    Words are random syllable strings with Zipf-distributed frequencies; each
    word has ``fanout`` likely successors. Sentences are capitalized and end
    with a period; paragraphs break every few sentences.
    """
    rng = np.random.default_rng(seed)
    words = []
    seen = set()
    while len(words) < n_words:
        w = "".join(
            rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS)
            for _ in range(int(rng.integers(1, 4)))
        )
        if w not in seen:
            seen.add(w)
            words.append(w)
    zipf = 1.0 / np.arange(1, n_words + 1)
    zipf /= zipf.sum()
    succ = np.stack([rng.choice(n_words, size=fanout, replace=False, p=zipf) for _ in range(n_words)])
    succ_p = rng.dirichlet(np.full(fanout, 0.7), size=n_words)

    out, size = [], 0
    cur = int(rng.choice(n_words, p=zipf))
    sentences = 0
    while size < n_bytes:
        n = int(rng.integers(4, 13))
        toks = []
        for _ in range(n):
            toks.append(words[cur])
            cur = int(succ[cur, rng.choice(fanout, p=succ_p[cur])])
        sent = " ".join(toks)
        sent = sent[0].upper() + sent[1:] + "."
        sentences += 1
        sep = "\n" if sentences % 5 == 0 else " "
        out.append(sent + sep)
        size += len(sent) + 1
    return "".join(out).encode("ascii")[:n_bytes]


def synthetic_corpus(n_bytes=500_000, seed=0):
    return Corpus.from_bytes(synthetic_text(n_bytes, seed), [f"synthetic:{seed}"])


def parse_ratio(ratio):
    """``"3:1"`` or ``(3, 1)`` -> fraction of samples assigned to the first part."""
    if isinstance(ratio, str):
        try:
            a, b = (Fraction(s.strip()) for s in ratio.split(":"))
        except ValueError as exc:
            raise ConfigError(f"bad split ratio {ratio!r}") from exc
    else:
        a, b = (Fraction(x) for x in ratio)
    if a < 0 or b < 0 or a + b == 0:
        raise ConfigError(f"split ratio parts must be non-negative and not both zero: {ratio!r}")
    return a / (a + b)


@dataclass
class Split:
    X1: np.ndarray
    X2: np.ndarray
    offsets1: np.ndarray
    offsets2: np.ndarray


def split_data(tokens, sample_count, seq_len, ratio="3:1", seed=0) -> Split:
    """Draw ``sample_count`` distinct non-overlapping windows and divide them.

    Windows start at multiples of ``seq_len``; a seeded permutation picks
    which ones are used. The first ``round(count * a / (a + b))`` go to
    ``X1`` (regularization) and the rest to ``X2`` (recovery fine-tuning).
    """
    tokens = np.asarray(tokens.tokens if isinstance(tokens, Corpus) else tokens)
    available = tokens.size // seq_len
    if sample_count < 1 or sample_count > available:
        raise DataError(f"need {sample_count} windows of {seq_len} tokens, corpus holds {available}")
    frac = parse_ratio(ratio)
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(available)[:sample_count] * seq_len
    n1 = int(np.floor(frac * sample_count + Fraction(1, 2)))

    def take(offs):
        if offs.size == 0:
            return np.zeros((0, seq_len), dtype=np.int64)
        return np.stack([tokens[o : o + seq_len] for o in offs]).astype(np.int64)

    return Split(take(chosen[:n1]), take(chosen[n1:]), chosen[:n1], chosen[n1:])


def random_windows(tokens, count, seq_len, rng):
    """``count`` windows at uniformly random offsets (overlap allowed)."""
    tokens = np.asarray(tokens)
    if tokens.size < seq_len:
        raise DataError("corpus shorter than one window")
    starts = rng.integers(0, tokens.size - seq_len + 1, size=count)
    return np.stack([tokens[s : s + seq_len] for s in starts]).astype(np.int64)


def eval_windows(tokens, seq_len):
    """Non-overlapping consecutive windows covering ``tokens``; the tail is dropped."""
    tokens = np.asarray(tokens)
    n = tokens.size // seq_len
    if n == 0:
        raise DataError(f"corpus of {tokens.size} tokens yields no window of {seq_len}")
    return tokens[: n * seq_len].reshape(n, seq_len).astype(np.int64)
