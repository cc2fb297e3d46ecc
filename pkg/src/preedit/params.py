"""Versioned parameter files shared by entropy models, editors and checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes   b"PEPF"
    version    uint32    FORMAT_VERSION
    header_len uint32    byte length of the JSON header
    header     UTF-8 JSON {"kind": str, "fields": [{"name": str, "shape": [int]}], "metadata": {...}}
    payload    float64 LE, each field C-order, concatenated in header field order
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"PEPF"
FORMAT_VERSION = 1


class ParamFileError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps(kind: str, arrays: Mapping[str, np.ndarray], metadata: Mapping[str, Any] | None = None) -> bytes:
    fields = []
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        fields.append({"name": name, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = json.dumps({"kind": kind, "fields": fields, "metadata": dict(metadata or {})}, sort_keys=True)
    header_bytes = header.encode("utf-8")
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header_bytes)) + header_bytes + b"".join(payload)


def loads(data: bytes) -> tuple[str, dict[str, np.ndarray], dict[str, Any]]:
    if data[:4] != MAGIC:
        raise ParamFileError("not a parameter file (bad magic)")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ParamFileError(f"unsupported parameter file version {version}")
    header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    offset = 12 + header_len
    arrays = {}
    for f in header["fields"]:
        shape = tuple(f["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise ParamFileError(f"truncated payload at field {f['name']!r}")
        arrays[f["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(data):
        raise ParamFileError("trailing bytes after payload")
    return header["kind"], arrays, header["metadata"]


def save(path, kind: str, arrays: Mapping[str, np.ndarray], metadata: Mapping[str, Any] | None = None) -> None:
    atomic_write_bytes(path, dumps(kind, arrays, metadata))


def load(path) -> tuple[str, dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"parameter file not found: {path}")
    return loads(path.read_bytes())
