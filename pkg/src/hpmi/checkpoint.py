"""Binary checkpoint format.

Layout (little-endian)::

    b"HPMI"  u16 version
    config:  u32 layers, heads, head_width, ffn_width, classes, tokens, patch_dim
             f64 ln_epsilon
             i32 ln_mode (-1 = standard layer norm, i = segmented around head i)
             u8  norm placement (1 = post-norm inside the residual branch)
    u32 tensor count
    per tensor, in canonical order:
             u16 name length, name (utf-8), u8 ndim, u32 dims[ndim], f64 data
    u32 crc32 of everything before it
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, ConfigMismatchError
from .transformer import ModelConfig, TransformerCheckpoint, from_params, param_shapes

MAGIC = b"HPMI"
VERSION = 1
POST_NORM = 1
_CFG = struct.Struct("<7Idib")


def dumps(ckpt: TransformerCheckpoint) -> bytes:
    ckpt.validate()
    c = ckpt.config
    parts = [MAGIC, struct.pack("<H", VERSION),
             _CFG.pack(c.layers, c.heads, c.head_width, c.ffn_width, c.classes, c.tokens,
                       c.patch_dim, c.ln_epsilon, -1 if ckpt.ln_mode is None else ckpt.ln_mode,
                       POST_NORM)]
    params = ckpt.params()
    parts.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes, expected: ModelConfig | None = None) -> TransformerCheckpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic bytes, not an HPMI checkpoint", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version} (expected {VERSION})", 4)
    cfg_at = r.pos
    L, h, dh, f, C, T, P, eps, mode, placement = r.unpack(_CFG.format, "config block")
    if placement != POST_NORM:
        raise CheckpointFormatError(f"unsupported norm placement {placement}", cfg_at)
    try:
        cfg = ModelConfig(L, h, dh, f, C, T, P, eps)
    except ValueError as exc:
        raise CheckpointFormatError(f"invalid config block: {exc}", cfg_at) from None
    if expected is not None and cfg != expected:
        raise ConfigMismatchError("checkpoint was written for a different config", expected.diff(cfg))
    shapes = param_shapes(cfg)
    (count,) = r.unpack("<I", "tensor count")
    if count != len(shapes):
        raise CheckpointFormatError(f"expected {len(shapes)} tensors, header says {count}", r.pos - 4)
    params = {}
    for want, shape in shapes.items():
        at = r.pos
        (n,) = r.unpack("<H", "tensor name length")
        name = r.take(n, "tensor name").decode("utf-8", errors="replace")
        if name != want:
            raise CheckpointFormatError(f"expected tensor {want!r}, found {name!r}", at)
        (ndim,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{ndim}I", f"{name} shape")
        if tuple(dims) != shape:
            raise CheckpointFormatError(f"{name}: shape {dims} does not match config {shape}", at)
        size = int(np.prod(dims, dtype=np.int64)) * 8
        params[name] = np.frombuffer(r.take(size, f"{name} data"), dtype="<f8").reshape(dims).astype(np.float64)
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if crc != zlib.crc32(buf[:body_end]):
        raise CheckpointFormatError("checksum mismatch", body_end)
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after checksum", r.pos)
    return from_params(cfg, params, None if mode < 0 else int(mode))


def save_checkpoint(ckpt: TransformerCheckpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path, expected: ModelConfig | None = None) -> TransformerCheckpoint:
    return loads(Path(path).read_bytes(), expected)
