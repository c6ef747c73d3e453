"""Binary checkpoint format.

Layout (little endian)::

    b"FAVE" | u32 version | 32-byte sha256 of the config JSON
    repeated: u32 name_len | name (utf-8) | u32 rank | u64 dims[rank] | f64 values

Everything (parameters, optimiser moments, generator state, the config JSON
itself and scalar metadata) is stored as named float64 blobs so the file
round-trips bit for bit.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig

MAGIC = b"FAVE"
VERSION = 1
_CONFIG_KEY = "meta.config_json"


class CheckpointError(Exception):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    stage: int
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    meta: dict[str, float] = field(default_factory=dict)

    def params(self, prefix: str = "param.") -> dict[str, torch.Tensor]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _bytes_to_blob(b: bytes) -> np.ndarray:
    return np.frombuffer(b, dtype=np.uint8).astype(np.float64)


def _blob_to_bytes(a: np.ndarray) -> bytes:
    return a.astype(np.uint8).tobytes()


def _write_blob(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d scalars at rank 0
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    config_json = ckpt.config.to_json().encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(hashlib.sha256(config_json).digest())
    _write_blob(buf, _CONFIG_KEY, _bytes_to_blob(config_json))
    _write_blob(buf, "meta.stage", np.asarray(float(ckpt.stage)))
    for k in sorted(ckpt.meta):
        _write_blob(buf, f"meta.{k}", np.asarray(float(ckpt.meta[k])))
    for k in sorted(ckpt.tensors):
        t = ckpt.tensors[k].detach()
        if t.dtype == torch.uint8:
            arr = t.numpy().astype(np.float64)
            k = f"u8:{k}"
        else:
            arr = t.to(torch.float64).numpy()
        _write_blob(buf, k, arr)
    Path(path).write_bytes(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise TruncatedBlobError(f"truncated blob while reading {what}")
    return b


def load_checkpoint(path: str | os.PathLike, expect: TrainConfig | None = None) -> Checkpoint:
    """Read a checkpoint; ``expect`` (optional) must match the stored config."""
    data = Path(path).read_bytes()
    if len(data) < 40 or data[:4] != MAGIC:
        raise CorruptHeaderError(f"{path}: not a checkpoint (bad magic or short header)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    digest = data[8:40]
    fh = io.BytesIO(data[40:])
    blobs: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(4)
        if not head:
            break
        if len(head) < 4:
            raise TruncatedBlobError("truncated blob header")
        (n,) = struct.unpack("<I", head)
        name = _read_exact(fh, n, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4, name))
        dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, name)) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(_read_exact(fh, 8 * count, name), dtype="<f8")
        blobs[name] = values.reshape(dims).astype(np.float64)
    if _CONFIG_KEY not in blobs:
        raise CorruptHeaderError(f"{path}: missing embedded config")
    config_json = _blob_to_bytes(blobs.pop(_CONFIG_KEY))
    if hashlib.sha256(config_json).digest() != digest:
        raise ConfigMismatchError(f"{path}: config mismatch (header digest does not match)")
    config = TrainConfig.from_dict(json.loads(config_json))
    if expect is not None and expect.digest() != digest:
        raise ConfigMismatchError(f"{path}: config mismatch with the supplied config")
    stage = int(blobs.pop("meta.stage"))
    meta, tensors = {}, {}
    for k, v in blobs.items():
        if k.startswith("meta."):
            meta[k[5:]] = float(v)
        elif k.startswith("u8:"):
            tensors[k[3:]] = torch.from_numpy(v.astype(np.uint8))
        else:
            tensors[k] = torch.from_numpy(v.copy())
    return Checkpoint(config, stage, tensors, meta)
