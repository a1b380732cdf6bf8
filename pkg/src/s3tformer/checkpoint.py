"""Binary checkpoint container.

Layout: ``b"S3T1"``, a little-endian u32 header length, a UTF-8 JSON header,
then the raw little-endian tensor payload.  The header carries the model
config, training bookkeeping and a manifest of ``{name, shape, dtype,
offset}`` entries with offsets relative to the payload start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig, from_dict, to_dict
from .data import atomic_write

MAGIC = b"S3T1"


class CheckpointError(ValueError):
    pass


def _le(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def pack(config: dict, tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=_le(arr.dtype))
        manifest.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"config": config, "meta": meta or {}, "manifest": manifest}, sort_keys=True).encode()
    return b"".join([MAGIC, struct.pack("<I", len(header)), header, *chunks])


def unpack(buf: bytes):
    """Return ``(config, tensors, meta)``."""
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 8:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hlen:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(buf[8 : 8 + hlen])
    base = 8 + hlen
    tensors = {}
    for e in header["manifest"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        start = base + e["offset"]
        if start + n > len(buf):
            raise CheckpointError(f"truncated payload for {e['name']} at byte offset {start}")
        tensors[e["name"]] = np.frombuffer(buf, dt, count=n // dt.itemsize, offset=start).reshape(e["shape"])
    return header["config"], tensors, header["meta"]


def save(path: str | Path, model, optimizer=None, meta: dict | None = None) -> None:
    """Write model state (and optionally optimizer moments) atomically."""
    tensors = dict(model.store.state())
    meta = dict(meta or {})
    if optimizer is not None:
        for k, v in optimizer.state_arrays().items():
            tensors[f"optim.{k}"] = v
        meta["optim_step"] = optimizer.t
    atomic_write(path, pack(to_dict(model.cfg), tensors, meta))


def read(path: str | Path):
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return unpack(buf)


def load_model(path: str | Path):
    """Rebuild the model from the stored config and restore its state."""
    from .model import S3TFormer

    config, tensors, meta = read(path)
    try:
        cfg = from_dict(ModelConfig, config)
    except ConfigError as e:
        raise CheckpointError(f"stored config invalid: {e}") from None
    model = S3TFormer(cfg)
    restore(model, tensors)
    return model, tensors, meta


def restore(model, tensors: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into the model's existing arrays in place."""
    state = model.store.state()
    missing = sorted(set(state) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks {missing[0]}")
    for name, dst in state.items():
        src = tensors[name]
        if src.shape != dst.shape:
            raise CheckpointError(f"{name}: stored shape {src.shape} != model shape {dst.shape}")
        dst[...] = src
