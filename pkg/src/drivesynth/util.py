"""Digests, seed derivation, and canonical array serialization.

All content digests in the package are SHA-256 over a canonical byte
encoding; arrays are encoded as little-endian float64, C order, with the
shape prepended, so a digest identifies the value and not the container.
"""

from __future__ import annotations

import hashlib
import io
import json

import numpy as np


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_array_bytes(arr: np.ndarray) -> bytes:
    """Canonical encoding: b'f64' + ndim + shape (little-endian int64) + data."""
    a = np.ascontiguousarray(arr, dtype="<f8")
    header = b"f64" + np.int64(a.ndim).tobytes()
    header += np.asarray(a.shape, dtype="<i8").tobytes()
    return header + a.tobytes()


def array_digest(arr: np.ndarray) -> str:
    return sha256_hex(canonical_array_bytes(arr))


def arrays_digest(arrays) -> str:
    """Digest an ordered sequence of arrays as one unit."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(canonical_array_bytes(np.asarray(a)))
    return h.hexdigest()


def derive_seed(global_seed: int, name: str) -> int:
    """Per-component seed from the single run seed: hash(global_seed, name).

    Stable across runs and platforms; returns a value usable by PCG64.
    """
    digest = hashlib.sha256(f"{int(global_seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(global_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(global_seed, name))


def save_array_npy(path, arr: np.ndarray) -> None:
    """Write a float array in the portable on-disk layout (npy, <f8, C order)."""
    np.save(path, np.ascontiguousarray(arr, dtype="<f8"))


def load_array_npy(path) -> np.ndarray:
    arr = np.load(path, allow_pickle=False)
    if arr.dtype.kind != "f":
        raise ValueError(f"{path}: expected a float array, found dtype {arr.dtype}")
    return np.ascontiguousarray(arr, dtype=np.float64)


def array_to_npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr, dtype="<f8"))
    return buf.getvalue()


def npy_bytes_to_array(data: bytes) -> np.ndarray:
    return np.load(io.BytesIO(data), allow_pickle=False).astype(np.float64)


def dump_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_jsonl(path):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
