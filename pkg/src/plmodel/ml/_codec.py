"""Bit-exact array encoding for model files.

Large arrays (tree nodes, KNN training points) are stored as base64 of
their little-endian bytes, deflated, inside the JSON document.  Decoding
restores the exact values; decimal text would be several times larger.
"""
from __future__ import annotations

import base64
import zlib

import numpy as np

_DTYPES = {"<f8", "<i8", "<i4", "<i1", "|i1"}


def pack(arr, dtype: str = "<f8") -> dict:
    a = np.ascontiguousarray(arr).astype(dtype, copy=False)
    blob = zlib.compress(a.tobytes(), 1)
    return {"dtype": dtype, "shape": list(a.shape), "zlib_b64": base64.b64encode(blob).decode("ascii")}


def unpack(doc) -> np.ndarray:
    if isinstance(doc, list):
        return np.asarray(doc)
    if not isinstance(doc, dict) or doc.get("dtype") not in _DTYPES:
        raise ValueError("malformed packed array")
    raw = zlib.decompress(base64.b64decode(doc["zlib_b64"], validate=True))
    shape = tuple(int(s) for s in doc["shape"])
    arr = np.frombuffer(raw, dtype=doc["dtype"])
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError("packed array size does not match its shape")
    return arr.reshape(shape).copy()
