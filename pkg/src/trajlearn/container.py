"""TCN1 tensor container: a flat, versioned file of named little-endian tensors.

Layout::

    b"TCN1"  u16 version  u32 entry_count  u32 meta_length  meta (utf-8 JSON)
    entry table, per entry:
        u16 name_length, name (utf-8), u8 dtype, u8 ndim, u32 dims[ndim], u64 offset
    payload (offsets are relative to the start of the payload)

All tensors are stored as float32 (dtype code 0). Writing is deterministic:
entries keep insertion order and the metadata JSON is key-sorted, so equal
inputs produce byte-identical files.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ContainerError

MAGIC = b"TCN1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


@dataclass
class TensorFile:
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise ContainerError(f"container has no tensor named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True, separators=(",", ":")).encode()
    table = io.BytesIO()
    payload = io.BytesIO()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode()
        table.write(struct.pack("<H", len(raw_name)))
        table.write(raw_name)
        table.write(struct.pack("<BB", 0, arr.ndim))
        table.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        table.write(struct.pack("<Q", payload.tell()))
        payload.write(arr.tobytes())
    header = MAGIC + struct.pack("<HII", VERSION, len(tensors), len(meta_bytes))
    return header + meta_bytes + table.getvalue() + payload.getvalue()


def loads(blob: bytes) -> TensorFile:
    if blob[:4] != MAGIC:
        raise ContainerError("bad magic, not a TCN1 container")
    try:
        version, count, meta_len = struct.unpack_from("<HII", blob, 4)
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        pos = 14
        meta = json.loads(blob[pos:pos + meta_len].decode())
        pos += meta_len
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode()
            pos += name_len
            dtype_code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            if dtype_code not in _DTYPES:
                raise ContainerError(f"tensor {name!r}: unknown dtype code {dtype_code}")
            entries.append((name, _DTYPES[dtype_code], shape, offset))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt container header: {exc}") from exc

    payload = memoryview(blob)[pos:]
    spans = []
    tensors: dict[str, np.ndarray] = {}
    for name, dtype, shape, offset in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(payload):
            raise ContainerError(f"tensor {name!r} extends past the end of the payload")
        spans.append((offset, offset + nbytes, name))
        tensors[name] = np.frombuffer(payload[offset:offset + nbytes], dtype=dtype).reshape(shape).copy()
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise ContainerError(f"tensors {a!r} and {b!r} overlap in the payload")
    if sum(end - start for start, end, _ in spans) != len(payload):
        raise ContainerError("declared tensor sizes do not match the payload length")
    return TensorFile(tensors, meta)


def save_model(path: str | Path, tensors: Mapping[str, np.ndarray],
               meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load_model(path: str | Path) -> TensorFile:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    return loads(path.read_bytes())
