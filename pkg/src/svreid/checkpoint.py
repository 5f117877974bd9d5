"""Binary checkpoint format ("SVR1").

Layout, all integers little-endian::

    b"SVR1"  u32 entry_count
    per entry: u16 name_len, name (UTF-8), u8 dtype (0 = f32), u8 rank,
               rank x u32 dims, raw f32 payload

Entries are written in lexicographic name order so a given parameter set
always serializes to the same bytes.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping, Optional, Union

import numpy as np

from .backbone import ModelParams
from .errors import (
    BadMagicError,
    CheckpointError,
    MissingTensorError,
    ShapeMismatchError,
    TruncatedCheckpointError,
    UnknownTensorError,
)
from .head import VerificationHead
from .tensor import Tensor

MAGIC = b"SVR1"
DTYPE_F32 = 0

PathOrFile = Union[str, os.PathLike, BinaryIO]


def write_tensors(tensors: Mapping[str, np.ndarray], fh: BinaryIO) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what} at byte {self.pos} (file is {len(self.data)} bytes)"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    r = _Reader(fh.read())
    magic = r.take(len(MAGIC), "magic") if len(r.data) >= len(MAGIC) else None
    if magic != MAGIC:
        raise BadMagicError(f"not an SVR1 checkpoint (magic {r.data[:4]!r})")
    (count,) = r.unpack("<I", "entry count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor name is not valid UTF-8: {exc}") from None
        dtype, rank = r.unpack("<BB", f"header of {name!r}")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype tag {dtype}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        payload = r.take(nbytes, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after {count} entries")
    return out


def _open(path: PathOrFile, mode: str):
    if hasattr(path, "read") or hasattr(path, "write"):
        return _Passthrough(path)
    return open(path, mode)


class _Passthrough:
    def __init__(self, fh):
        self.fh = fh

    def __enter__(self):
        return self.fh

    def __exit__(self, *exc):
        return False


def export_checkpoint(params: ModelParams, path: PathOrFile, head: Optional[VerificationHead] = None) -> None:
    tensors = {name: t.data for name, t in params.items()}
    if head is not None:
        tensors.update({name: t.data for name, t in head.tensors().items()})
    buf = io.BytesIO()
    write_tensors(tensors, buf)
    with _open(path, "wb") as fh:
        fh.write(buf.getvalue())


def import_checkpoint(
    params: ModelParams, path: PathOrFile, head: Optional[VerificationHead] = None
) -> tuple[ModelParams, Optional[VerificationHead]]:
    """Load tensors into copies of ``params`` (and ``head``), demanding an exact name/shape match."""
    with _open(path, "rb") as fh:
        loaded = read_tensors(fh)
    template = {name: t for name, t in params.items()}
    if head is not None:
        template.update(head.tensors())
    unknown = sorted(set(loaded) - set(template))
    if unknown:
        raise UnknownTensorError(f"checkpoint has unknown tensor(s): {', '.join(unknown)}")
    missing = sorted(set(template) - set(loaded))
    if missing:
        raise MissingTensorError(f"checkpoint is missing tensor(s): {', '.join(missing)}")
    for name, t in template.items():
        if loaded[name].shape != t.shape:
            raise ShapeMismatchError(f"tensor {name!r}: checkpoint shape {loaded[name].shape}, model expects {t.shape}")
    new_params = ModelParams(
        params.config,
        {name: Tensor(loaded[name], requires_grad=t.requires_grad) for name, t in params.items()},
    )
    new_head = None
    if head is not None:
        new_head = VerificationHead(
            Tensor(loaded["head.weight"], requires_grad=True),
            Tensor(loaded["head.bias"], requires_grad=True),
            head.dropout,
        )
    return new_params, new_head
