"""Raw array files with JSON sidecars — the repo-wide array exchange format.

A real array ``a`` is stored as its little-endian IEEE-754 float64 payload in
row-major order at ``path``, described by a sidecar ``path + ".json"``::

    {"shape": [...], "dtype": "f8", "order": "row-major"}

Complex arrays are stored as interleaved (re, im) float64 pairs — the memory
layout of complex128 — with ``"complex": true`` added to the sidecar; the
recorded shape is the complex shape.  Round-trips are lossless for any finite
float64/complex128 content.
"""

from __future__ import annotations

import json
import os

import numpy as np

__all__ = ["write_array", "read_array", "sidecar_path"]


def sidecar_path(path) -> str:
    return os.fspath(path) + ".json"


def write_array(path, values: np.ndarray) -> None:
    """Write ``values`` (real or complex) at ``path`` plus its sidecar."""
    arr = np.asarray(values)
    if arr.dtype.kind == "c":
        payload = np.ascontiguousarray(arr, dtype="<c16")
        meta = {"shape": list(arr.shape), "dtype": "f8", "order": "row-major",
                "complex": True}
    elif arr.dtype.kind in "fiub":
        payload = np.ascontiguousarray(arr, dtype="<f8")
        meta = {"shape": list(arr.shape), "dtype": "f8", "order": "row-major"}
    else:
        raise ValueError(f"cannot store arrays of dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(payload.tobytes())
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh)
        fh.write("\n")


def read_array(path) -> np.ndarray:
    """Read an array written by :func:`write_array` (shape from the sidecar)."""
    with open(sidecar_path(path)) as fh:
        meta = json.load(fh)
    if meta.get("dtype") != "f8" or meta.get("order") != "row-major":
        raise ValueError(f"unsupported array file metadata: {meta}")
    shape = tuple(int(n) for n in meta["shape"])
    raw = np.fromfile(path, dtype="<c16" if meta.get("complex") else "<f8")
    expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if raw.size != expected:
        raise ValueError(
            f"payload of {path} holds {raw.size} values, sidecar says {expected}"
        )
    return raw.reshape(shape).astype(raw.dtype.newbyteorder("="), copy=False)
