"""Versioned container of named arrays with a textual header.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic, ASCII "UMTENSR1"
    offset 8   8 bytes   uint64 H, length of the header in bytes
    offset 16  H bytes   UTF-8 JSON header (keys sorted, no whitespace)
    offset 16+H          payload: the arrays' raw C-order bytes, concatenated
                         in header order

The header is ``{"format_version": 1, "meta": {...}, "tensors": [...]}`` where
each tensor entry has ``name``, ``dtype`` (numpy little-endian type string such
as ``"<f4"``), ``shape`` and ``offset`` / ``nbytes`` relative to the payload
start. Writing the same arrays and meta twice yields identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import FormatError, LoadError

MAGIC = b"UMTENSR1"
FORMAT_VERSION = 1
_ALLOWED = {"<f4", "<f8", "<i4", "<i8", "|u1", "|b1"}


def _canonical(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    if arr.dtype.str not in _ALLOWED:
        raise FormatError(f"unsupported dtype {arr.dtype.str}")
    return np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, value in tensors.items():
        arr = _canonical(value)
        raw = arr.tobytes(order="C")
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
             "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "meta": dict(meta or {}), "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError("not a tensor container (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {header.get('format_version')}")
    base = 16 + hlen
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        chunk = data[start : start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise FormatError(f"truncated payload for tensor {e['name']!r}")
        out[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(tuple(e["shape"])).copy()
    return out, header["meta"]


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    atomic_write_bytes(path, dumps(tensors, meta))


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise LoadError(f"missing file: {path}") from exc
    return loads(data)
