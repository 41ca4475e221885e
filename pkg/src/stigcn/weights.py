"""Binary weight files.

Layout (little-endian)::

    header  b"STIG" | u32 version | 32-byte config digest | u32 tensor count
    body    per tensor: u32 name length | utf-8 name | u32 rank | u32 dims[rank]
            | float32 values, row-major
    footer  u64 checksum (BLAKE2b-64 of header + body)

Tensors are the model's parameters followed by its batch-norm running
statistics, in registration order.
"""
from __future__ import annotations

import hashlib
import struct
import warnings
from pathlib import Path

import numpy as np

from .model import NetworkConfig, STIGCN, build_stigcn

__all__ = ["WeightFileError", "save_weights", "load_weights", "read_tensors", "FORMAT_VERSION"]

MAGIC = b"STIG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI32sI")


class WeightFileError(ValueError):
    pass


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _named_tensors(model: STIGCN):
    for name, p in model.named_parameters():
        yield name, p.value
    yield from model.named_buffers()


def save_weights(model: STIGCN, path) -> None:
    tensors = list(_named_tensors(model))
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, model.config.digest(), len(tensors))]
    for name, value in tensors:
        raw = name.encode()
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    blob = b"".join(parts)
    Path(path).write_bytes(blob + struct.pack("<Q", _checksum(blob)))


def read_tensors(path):
    """Parse and verify a weight file; returns ``(digest, [(name, array), ...])``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 8:
        raise WeightFileError(f"truncated weight file: {len(data)} bytes, "
                              f"header needs {_HEADER.size + 8}")
    magic, version, digest, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise WeightFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise WeightFileError(f"unsupported weight format version {version}")
    body_end = len(data) - 8
    off = _HEADER.size
    tensors = []

    def take(n):
        nonlocal off
        if off + n > body_end:
            raise WeightFileError(f"truncated weight file at byte offset {off}: "
                                  f"need {n} more bytes")
        chunk = data[off:off + n]
        off += n
        return chunk

    try:
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = take(nlen).decode()
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
            tensors.append((name, arr))
    except (UnicodeDecodeError, struct.error, ValueError) as exc:
        if isinstance(exc, WeightFileError):
            raise
        raise WeightFileError(f"corrupt weight file near byte offset {off}: {exc}") from exc
    (stored,) = struct.unpack("<Q", data[body_end:])
    if _checksum(data[:body_end]) != stored:
        raise WeightFileError("checksum mismatch: weight file is corrupt")
    if off != body_end:
        raise WeightFileError(f"{body_end - off} trailing bytes after the last tensor")
    return digest, tensors


def load_weights(path, target) -> STIGCN:
    """Load into ``target`` (a model, or a config to build one from)."""
    model = build_stigcn(target) if isinstance(target, NetworkConfig) else target
    digest, tensors = read_tensors(path)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = list(params) + list(buffers)
    names = [n for n, _ in tensors]
    for want, (name, arr) in zip(expected, tensors):
        current = params[want].value if want in params else buffers[want]
        if name != want or arr.shape != current.shape:
            raise WeightFileError(f"tensor {name!r} {arr.shape} does not match "
                                  f"{want!r} {current.shape} in the target model")
    if len(names) != len(expected):
        raise WeightFileError(f"file holds {len(names)} tensors, model expects {len(expected)}")
    for name, arr in tensors:
        if name in params:
            params[name].value = arr.astype(model.dtype)
        else:
            model.set_buffer(name, arr.astype(model.dtype))
    if digest != model.config.digest():
        warnings.warn("weight file was written for a different network config "
                      "with compatible tensor shapes", stacklevel=2)
    return model
