"""Checkpoint container: length-prefixed JSON header + raw little-endian payloads.

Layout::

    8 bytes   header length N, unsigned little-endian
    N bytes   UTF-8 JSON: {"format_version", "meta", "tensors": [{name, shape, dtype, offset, nbytes}]}
    ...       tensor payloads back to back, offsets relative to the end of the header

The JSON is written with sorted keys and no whitespace so that identical
content always produces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .tensor import Tensor

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


def _as_array(value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def encode_checkpoint(params: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    payloads = []
    offset = 0
    for name in sorted(params):
        arr = _as_array(params[name])
        raw = arr.tobytes(order="C")
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "meta": dict(meta or {}), "tensors": entries}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(head)) + head + b"".join(payloads)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    (n,) = _LEN.unpack_from(blob, 0)
    header = json.loads(blob[_LEN.size : _LEN.size + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {header.get('format_version')}")
    base = _LEN.size + n
    params = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(blob[start : start + entry["nbytes"]], dtype=np.dtype(entry["dtype"]))
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]).newbyteorder("="))
    return params, header["meta"]


def save_checkpoint(path, params: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> str:
    """Write ``params`` to ``path`` atomically; return the content hash."""
    blob = encode_checkpoint(params, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode_checkpoint(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_hash(params: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> str:
    """Content hash of an in-memory parameter set (same bytes as the saved file)."""
    return hashlib.sha256(encode_checkpoint(params, meta)).hexdigest()
