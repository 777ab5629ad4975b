"""Versioned checkpoint container.

Layout (little-endian)::

    b"SOCK" | u16 version | u32 header length | JSON header | u32 CRC32(header)
    u32 tensor count | per tensor: u32 block length | tensor block | u32 CRC32(block)

The JSON header holds the model config, step, seed and free-form training
metadata. Tensor blocks use the ``numerics.pack_tensor`` layout; model
parameters keep their dotted names and AdamW moments are stored as
``opt.m.<name>`` / ``opt.v.<name>``. Random streams are derived from
(seed, purpose, step/epoch), so the seed and step are all the RNG state a
resumed run needs.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, CorruptionError
from .model import ModelConfig
from .numerics import pack_tensor, unpack_tensor
from .optim import AdamWState

MAGIC = b"SOCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> ndarray
    step: int = 0
    seed: int = 0
    optimizer: AdamWState | None = None
    meta: dict = field(default_factory=dict)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "model": ckpt.config.to_dict(),
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
        "optimizer_step": None if ckpt.optimizer is None else int(ckpt.optimizer.step),
        "meta": ckpt.meta,
    }
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = list(ckpt.params.items())
    if ckpt.optimizer is not None:
        tensors += [(f"opt.m.{k}", v) for k, v in sorted(ckpt.optimizer.m.items())]
        tensors += [(f"opt.v.{k}", v) for k, v in sorted(ckpt.optimizer.v.items())]
    parts = [_PREFIX.pack(MAGIC, VERSION, len(raw_header)), raw_header,
             _U32.pack(zlib.crc32(raw_header)), _U32.pack(len(tensors))]
    for name, arr in tensors:
        block = pack_tensor(name, np.asarray(arr))
        parts += [_U32.pack(len(block)), block, _U32.pack(zlib.crc32(block))]
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint):
    """Write atomically: an interrupted save never replaces the previous file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _read(buf, offset, n, what):
    if offset + n > len(buf):
        raise CorruptionError(f"truncated checkpoint while reading {what}", offset)
    return buf[offset : offset + n], offset + n


def parse_checkpoint(buf: bytes, expected: ModelConfig | None = None) -> Checkpoint:
    raw, off = _read(buf, 0, _PREFIX.size, "file prefix")
    magic, version, hlen = _PREFIX.unpack(raw)
    if magic != MAGIC:
        raise CorruptionError("not a checkpoint file (bad magic)", 0)
    if version != VERSION:
        raise CompatibilityError(f"checkpoint format version {version}, this reader supports {VERSION}")
    hstart = off
    raw_header, off = _read(buf, off, hlen, "header")
    crc, off = _read(buf, off, 4, "header checksum")
    if _U32.unpack(crc)[0] != zlib.crc32(raw_header):
        raise CorruptionError("header checksum mismatch", hstart)
    header = json.loads(raw_header.decode("utf-8"))
    config = ModelConfig.from_dict(header["model"])
    if expected is not None:
        check_compatible(config, expected)
    raw, off = _read(buf, off, 4, "tensor count")
    (count,) = _U32.unpack(raw)
    params, m, v = {}, {}, {}
    for _ in range(count):
        raw, off = _read(buf, off, 4, "tensor block length")
        (blen,) = _U32.unpack(raw)
        bstart = off
        block, off = _read(buf, off, blen, "tensor block")
        crc, off = _read(buf, off, 4, "tensor checksum")
        if _U32.unpack(crc)[0] != zlib.crc32(block):
            raise CorruptionError("tensor checksum mismatch", bstart)
        name, arr, _ = unpack_tensor(block)
        if name.startswith("opt.m."):
            m[name[6:]] = arr
        elif name.startswith("opt.v."):
            v[name[6:]] = arr
        else:
            params[name] = arr
    if off != len(buf):
        raise CorruptionError("trailing bytes after last tensor", off)
    opt_step = header.get("optimizer_step")
    optimizer = None if opt_step is None else AdamWState(step=opt_step, m=m, v=v)
    return Checkpoint(config, params, header["step"], header.get("seed", 0), optimizer, header.get("meta", {}))


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), expected)


def check_compatible(found: ModelConfig, expected: ModelConfig):
    a, b = found.to_dict(), expected.to_dict()
    diff = sorted(k for k in a if a[k] != b.get(k))
    if diff:
        detail = ", ".join(f"{k}: checkpoint={a[k]!r} expected={b.get(k)!r}" for k in diff)
        raise CompatibilityError(f"checkpoint config differs in {detail}")
