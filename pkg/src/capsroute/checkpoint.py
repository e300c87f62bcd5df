"""Versioned binary parameter container: named tensors plus a config fingerprint.

Layout: magic, little-endian uint64 header length, JSON header (version,
fingerprint, tensor index with dtype/shape/offset), then the raw
little-endian tensor blob. Loading refuses a fingerprint mismatch.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"CRCKPT01"
_VERSION = 1
_DTYPES = {"<f8", "<f4"}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: Path, named_arrays: dict[str, np.ndarray], fingerprint: dict) -> None:
    index = {}
    blobs = []
    offset = 0
    for name, arr in named_arrays.items():
        arr = np.asarray(arr)
        dtype = "<f4" if arr.dtype == np.float32 else "<f8"
        data = arr.astype(dtype).tobytes()
        index[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"version": _VERSION, "fingerprint": fingerprint, "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: Path, expected_fingerprint: dict | None = None) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    if header.get("version") != _VERSION:
        raise CheckpointError(f"{path} has unsupported version {header.get('version')}")
    fingerprint = header["fingerprint"]
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise CheckpointError(
            f"fingerprint mismatch for {path}:\n  stored:   {fingerprint}\n  expected: {expected_fingerprint}"
        )
    blob = raw[16 + header_len :]
    arrays = {}
    for name, meta in header["tensors"].items():
        if meta["dtype"] not in _DTYPES:
            raise CheckpointError(f"{path} tensor {name!r} has unsupported dtype {meta['dtype']}")
        chunk = blob[meta["offset"] : meta["offset"] + meta["nbytes"]]
        if len(chunk) != meta["nbytes"]:
            raise CheckpointError(f"{path} is truncated at tensor {name!r}")
        arrays[name] = np.frombuffer(chunk, dtype=meta["dtype"]).reshape(meta["shape"]).copy()
    return arrays, fingerprint
