"""Binary checkpoint format.

Little-endian layout::

    b"DRSS"                      magic
    u32                          format version
    str                          stage tag
    str                          model config as sorted-key JSON
    u8                           mask present (0/1)
      [u32 d, f64 p, str strategy, u32 count, count * u32 index]
    u32                          tensor count
      per tensor: str name, u32 ndim, ndim * u32 extent, f64 data (row-major)

``str`` is a u32 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .channels import ChannelMask
from .errors import FormatError
from .model import ModelConfig, ModelParams

MAGIC = b"DRSS"
VERSION = 1
STAGES = ("init", "regularized", "masked", "compacted", "rft")


def _str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def dumps(params: ModelParams, stage, mask: ChannelMask | None = None) -> bytes:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    parts = [MAGIC, struct.pack("<I", VERSION), _str(stage), _str(json.dumps(params.config.to_dict(), sort_keys=True))]
    if mask is None:
        parts.append(b"\x00")
    else:
        parts += [b"\x01", struct.pack("<Id", mask.d, float(mask.p)), _str(mask.strategy), struct.pack("<I", len(mask.K))]
        parts.append(np.asarray(mask.K, dtype="<u4").tobytes())
    parts.append(struct.pack("<I", len(params.tensors)))
    for name, arr in params.tensors.items():
        parts += [_str(name), struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape)]
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what):
        (n,) = self.unpack("<I", what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 in {what} at offset {self.pos}", self.pos) from exc


def loads(buf: bytes):
    """Return ``(params, stage, mask_or_None)``."""
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not a DRSS checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)
    stage = r.string("stage tag")
    if stage not in STAGES:
        raise FormatError(f"unknown stage tag {stage!r}", r.pos)
    try:
        config = ModelConfig(**json.loads(r.string("config")))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid config block before offset {r.pos}: {exc}", r.pos) from exc
    mask = None
    (flag,) = r.unpack("<B", "mask flag")
    if flag == 1:
        d, p = r.unpack("<Id", "mask header")
        strategy = r.string("mask strategy")
        (count,) = r.unpack("<I", "mask count")
        idx = np.frombuffer(r.take(4 * count, "mask indices"), dtype="<u4")
        mask = ChannelMask(int(d), tuple(int(i) for i in idx), float(p), strategy)
    elif flag != 0:
        raise FormatError(f"bad mask flag {flag} at offset {r.pos - 1}", r.pos - 1)
    (n,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(n):
        name = r.string("tensor name")
        (ndim,) = r.unpack("<I", f"rank of {name}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * size, f"data of {name}"), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = data
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after offset {r.pos}", r.pos)
    return ModelParams(config, tensors), stage, mask


def save_checkpoint(params: ModelParams, path, stage, mask=None):
    Path(path).write_bytes(dumps(params, stage, mask))


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
