"""Tensor files: raw little-endian bytes plus a JSON sidecar ``{shape, dtype}``."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ParameterError
from .tensor import Tensor

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "u1"}


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".bin", ".json"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".bin"), path.with_name(path.name + ".json")


def save_array(path, arr: np.ndarray) -> tuple[Path, Path]:
    arr = np.asarray(arr)
    name = arr.dtype.name
    if name not in _DTYPES:
        raise ParameterError(f"cannot serialize dtype {name}")
    bin_path, meta_path = _paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes())
    meta_path.write_text(json.dumps({"shape": list(arr.shape), "dtype": name}) + "\n")
    return bin_path, meta_path


def load_array(path) -> np.ndarray:
    bin_path, meta_path = _paths(path)
    meta = json.loads(meta_path.read_text())
    if meta["dtype"] not in _DTYPES:
        raise ParameterError(f"unknown dtype {meta['dtype']!r} in {meta_path}")
    raw = np.frombuffer(bin_path.read_bytes(), dtype=_DTYPES[meta["dtype"]])
    shape = tuple(meta["shape"])
    if raw.size != int(np.prod(shape, dtype=np.int64)):
        raise ParameterError(f"{bin_path}: {raw.size} elements do not fill shape {shape}")
    return raw.astype(meta["dtype"]).reshape(shape)


def save_tensor(path, tensor: Tensor) -> tuple[Path, Path]:
    return save_array(path, tensor.data)


def load_tensor(path, requires_grad: bool = False) -> Tensor:
    return Tensor(load_array(path), requires_grad=requires_grad)
