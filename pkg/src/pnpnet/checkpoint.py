"""Binary checkpoint format for model parameters.

Layout (little-endian): magic "PNPC" | version u32 | tensor count u32 |
per tensor: name length u32, UTF-8 name, rank u32, dims u32[], f32 data |
trailing u64 FNV-1a checksum of all preceding bytes.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PNPC"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class CheckpointError(ValueError):
    pass


class ShapeError(CheckpointError):
    """Stored tensor shape disagrees with the model being loaded."""


def fnv1a64(blob: bytes) -> int:
    h = _FNV_OFFSET
    for b in blob:
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def save_tensors(arrays: dict, path):
    """Write a name -> ndarray mapping; iteration order is preserved."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim)
        out += struct.pack("<%dI" % arr.ndim, *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<Q", fnv1a64(bytes(out)))
    with open(path, "wb") as fh:
        fh.write(out)


def load_tensors(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20:
        raise CheckpointError("truncated checkpoint: %d bytes" % len(blob))
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic %r, expected %r" % (blob[:4], MAGIC))
    (stored,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if fnv1a64(blob[:-8]) != stored:
        raise CheckpointError("checksum mismatch, file is corrupt")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError("unsupported version %d" % version)
    off = 12
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from("<%dI" % rank, blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        arrays[name] = arr.astype(np.float32).copy()
    if off != len(blob) - 8:
        raise CheckpointError("trailing bytes after tensor data at offset %d" % off)
    return arrays


def save_model(model, path, extra: dict | None = None):
    arrays = {name: p.data for name, p in model.parameters().items()}
    if extra:
        arrays.update(extra)
    save_tensors(arrays, path)


def load_model(model, path):
    """Copy stored tensors into a built model; unknown names are returned."""
    arrays = load_tensors(path)
    params = model.parameters()
    extra = {}
    for name, arr in arrays.items():
        if name in params:
            p = params[name]
            if p.data.shape != tuple(arr.shape):
                raise ShapeError("shape mismatch for %r: model %r vs file %r"
                                      % (name, p.data.shape, tuple(arr.shape)))
            p.data[...] = arr.astype(p.data.dtype)
        else:
            extra[name] = arr
    missing = set(params) - set(arrays)
    if missing:
        raise CheckpointError("checkpoint missing tensors: %s" % sorted(missing)[:3])
    return extra
