"""Binary checkpoint shared by the detector and the recognizer.

Layout (little-endian): magic ``NNCKPT1\\0``, u32 tensor count, then per
tensor: u32 name length, UTF-8 name, u32 rank, rank x u32 dims, float32 data.
Model configuration travels as the tensor ``meta.json`` holding the UTF-8
bytes of a JSON document, one byte per float. Training checkpoints also
carry the RMSProp accumulators as ``opt/<parameter>`` tensors.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"NNCKPT1\x00"
META = "meta.json"
OPT_PREFIX = "opt/"  # optimizer accumulators stored alongside parameters


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    return out


def save_model(path, params: dict, meta: dict) -> None:
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    save_tensors(path, {META: blob.astype(np.float32), **params})


def load_model(path):
    """Returns (params, meta)."""
    tensors = load_tensors(path)
    if META not in tensors:
        raise CheckpointError(f"{path}: no {META} tensor")
    meta = json.loads(tensors.pop(META).astype(np.uint8).tobytes().decode("utf-8"))
    return tensors, meta
