"""Little-endian tensor container ("JLT1") and model checkpoints built on it.

File layout::

    record*  index  footer

Each record is ``b"JLT1"``, a uint32 dtype code, a uint32 rank, ``rank``
uint64 dims, then the raw little-endian payload. The index is UTF-8 JSON
``{"tensors": [{"name", "offset", "dtype", "shape"}...], "meta": {...}}``
with ``offset`` pointing at the record's magic. The footer is the uint64
byte length of the index followed by ``b"JLTI"``.
"""
from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

MAGIC = b"JLT1"
INDEX_MAGIC = b"JLTI"
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i4")}
CODES = {v: k for k, v in DTYPES.items()}
CHECKPOINT_FORMAT = "jamlab-checkpoint"
CHECKPOINT_VERSION = 1


class ContainerError(ValueError):
    pass


def _code(arr):
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if np.issubdtype(dt, np.floating):
        return 1
    if np.issubdtype(dt, np.integer):
        return 2
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def encode(tensors, meta=None):
    """Serialize ``{name: array}`` (insertion order kept) to bytes."""
    buf = io.BytesIO()
    index = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _code(arr)
        data = arr.astype(DTYPES[code], order="C")
        if code == 2 and not np.array_equal(data, arr):
            raise ContainerError(f"{name}: integer values overflow int32")
        index.append({"name": name, "offset": buf.tell(), "dtype": code, "shape": list(arr.shape)})
        buf.write(MAGIC)
        buf.write(struct.pack("<II", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(data.tobytes())
    blob = json.dumps({"tensors": index, "meta": meta or {}}, sort_keys=True).encode()
    buf.write(blob)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(INDEX_MAGIC)
    return buf.getvalue()


def decode(raw):
    """Inverse of :func:`encode`: returns ``(tensors, meta)``."""
    raw = bytes(raw)
    if len(raw) < 12 or raw[-4:] != INDEX_MAGIC:
        raise ContainerError("missing container footer")
    (n_index,) = struct.unpack("<Q", raw[-12:-4])
    start = len(raw) - 12 - n_index
    if start < 0:
        raise ContainerError("index length exceeds file")
    try:
        index = json.loads(raw[start : len(raw) - 12].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt index: {exc}") from None
    tensors = {}
    for ent in index["tensors"]:
        off = ent["offset"]
        if raw[off : off + 4] != MAGIC:
            raise ContainerError(f"{ent['name']}: bad record magic at {off}")
        code, rank = struct.unpack("<II", raw[off + 4 : off + 12])
        if code not in DTYPES:
            raise ContainerError(f"{ent['name']}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", raw[off + 12 : off + 12 + 8 * rank])
        if list(dims) != ent["shape"] or code != ent["dtype"]:
            raise ContainerError(f"{ent['name']}: header disagrees with index")
        body = off + 12 + 8 * rank
        size = int(np.prod(dims, dtype=np.int64)) * 4
        if body + size > start:
            raise ContainerError(f"{ent['name']}: payload runs past the index")
        tensors[ent["name"]] = np.frombuffer(raw, DTYPES[code], int(np.prod(dims)), body).reshape(dims).copy()
    return tensors, index.get("meta", {})


def write(path, tensors, meta=None):
    raw = encode(tensors, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(raw)
    os.replace(tmp, path)
    return raw


def read(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


# checkpoints


def save_checkpoint(path, model, extra=None):
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model.config.to_dict(),
    }
    meta.update(extra or {})
    return write(path, model.state_dict(), meta)


def load_checkpoint(path):
    """Rebuild the model described by the header and load its parameters.

    Raises ``ContainerError`` for anything that is not a checkpoint and
    ``ModelError`` when the stored tensors do not fit the architecture.
    """
    from .moe.model import ModelConfig, ModelError, MoEModel

    tensors, meta = read(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ContainerError(f"{path}: not a checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ContainerError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    try:
        model = MoEModel(ModelConfig.from_dict(meta["model"]))
        model.load_state_dict(tensors)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"checkpoint does not match architecture: {exc}") from None
    return model, meta
