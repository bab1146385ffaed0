"""Flat binary parameter checkpoints.

Layout: magic ``BRLB1``, then for each parameter a little-endian uint32 name
length, the UTF-8 name, uint32 rank, ``rank`` uint32 dims and the values as
little-endian float64 in C order.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .tensor import Parameter

MAGIC = b"BRLB1"


class CheckpointError(ValueError):
    """Malformed checkpoint or mismatch with the model's parameters."""


def dumps(params: Iterable[Parameter]) -> bytes:
    chunks = [MAGIC]
    for p in params:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("bad checkpoint magic")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 8 * count
            if end > len(blob):
                raise CheckpointError(f"truncated data for {name!r}")
            out[name] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
            pos = end
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def save(path, params: Iterable[Parameter]) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def assign(params: Iterable[Parameter], values: Mapping[str, np.ndarray], strict: bool = True) -> None:
    """Copy checkpoint values into parameters in place."""
    for p in params:
        if p.name not in values:
            if strict:
                raise CheckpointError(f"checkpoint lacks parameter {p.name!r}")
            continue
        v = values[p.name]
        if v.shape != p.data.shape:
            raise CheckpointError(f"{p.name}: checkpoint shape {v.shape} != model shape {p.data.shape}")
        p.data[...] = v
