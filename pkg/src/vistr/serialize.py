"""Portable tensor files.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header listing
``{name, shape, dtype, byte_offset}`` per tensor, then the raw little-endian
buffers back to back. Offsets are relative to the end of the header.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "u1",
    "bool": "?",
}


class TensorFileError(ValueError):
    pass


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def dumps_tensors(tensors: Mapping[str, object]) -> bytes:
    header = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        arr = _as_numpy(value)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise TensorFileError(f"unsupported dtype {dtype} for tensor {name!r}")
        buf = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        header.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "byte_offset": offset})
        chunks.append(buf)
        offset += len(buf)
    raw_header = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(raw_header)) + raw_header + b"".join(chunks)


def loads_tensors(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(data) < 8:
        raise TensorFileError("truncated tensor file")
    (hlen,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"bad tensor file header: {exc}") from exc
    body = memoryview(data)[8 + hlen :]
    out = OrderedDict()
    for entry in header:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["byte_offset"]
        stop = start + count * dtype.itemsize
        if stop > len(body):
            raise TensorFileError(f"tensor {entry['name']!r} runs past end of file")
        arr = np.frombuffer(body[start:stop], dtype=dtype).reshape(entry["shape"])
        out[entry["name"]] = arr.astype(np.dtype(entry["dtype"]), copy=True)
    return out


def save_tensors(tensors: Mapping[str, object], path) -> None:
    Path(path).write_bytes(dumps_tensors(tensors))


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    return loads_tensors(Path(path).read_bytes())


def save_checkpoint(model: torch.nn.Module, path) -> None:
    save_tensors(model.state_dict(), path)


def load_checkpoint(model: torch.nn.Module, path) -> None:
    """Load values into ``model``; names and shapes must agree exactly."""
    stored = load_tensors(path)
    own = model.state_dict()
    missing = sorted(set(own) - set(stored))
    unexpected = sorted(set(stored) - set(own))
    if missing or unexpected:
        raise TensorFileError(
            f"checkpoint does not match model config: missing={missing[:5]} unexpected={unexpected[:5]}"
        )
    for name, value in stored.items():
        if tuple(value.shape) != tuple(own[name].shape):
            raise TensorFileError(
                f"checkpoint tensor {name!r} has shape {tuple(value.shape)}, "
                f"model expects {tuple(own[name].shape)}"
            )
    model.load_state_dict({k: torch.from_numpy(v) for k, v in stored.items()})
