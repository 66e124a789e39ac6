"""Checkpoint files: b"HSTCKPT1", u64 header length, JSON header, f32 payload.

The header maps each tensor name to its shape, dtype and byte offset into
the payload (which starts right after the header). All integers and floats
are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import HstConfig, param_shapes
from .tensor import Tensor

MAGIC = b"HSTCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointIncompatible(CheckpointError):
    """Names or shapes do not match the requested configuration."""


class CheckpointCorrupt(CheckpointError):
    pass


class CheckpointMissing(CheckpointError):
    pass


def save_checkpoint(params: dict[str, Tensor], cfg: HstConfig, path, extra: dict | None = None) -> None:
    entries, blobs, offset = {}, [], 0
    for name in param_shapes(cfg):
        if name not in params:
            raise CheckpointIncompatible(f"parameter {name} is missing")
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        entries[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset, "nbytes": arr.nbytes}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"format_version": FORMAT_VERSION, "config": cfg.to_dict(), "tensors": entries}
    if extra:
        header["extra"] = extra
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def read_header(path) -> tuple[dict, int]:
    """(header, payload start offset)."""
    try:
        fh = open(path, "rb")
    except FileNotFoundError as exc:
        raise CheckpointMissing(f"{path}: no such checkpoint") from exc
    with fh:
        head = fh.read(16)
        if len(head) < 16 or head[:8] != MAGIC:
            raise CheckpointCorrupt(f"{path}: bad magic")
        (n,) = struct.unpack("<Q", head[8:])
        raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointCorrupt(f"{path}: truncated header")
    try:
        header = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CheckpointCorrupt(f"{path}: unreadable header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointIncompatible(f"{path}: unsupported format version {header.get('format_version')}")
    return header, 16 + n


def load_checkpoint(path, cfg: HstConfig | None = None, dtype=np.float32) -> tuple[dict[str, Tensor], HstConfig]:
    """Load parameters, checking them against ``cfg`` (or the echoed config when None)."""
    header, start = read_header(path)
    cfg = cfg or HstConfig.from_dict(header["config"])
    tensors = header["tensors"]
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointIncompatible(f"{path}: tensor {name} missing from checkpoint")
        if tuple(tensors[name]["shape"]) != shape:
            raise CheckpointIncompatible(
                f"{path}: tensor {name} has shape {tuple(tensors[name]['shape'])}, config expects {shape}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise CheckpointIncompatible(f"{path}: unexpected tensor {extra[0]}")
    payload = Path(path).read_bytes()[start:]
    params = {}
    for name in expected:
        e = tensors[name]
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointCorrupt(f"{path}: payload truncated inside {name}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype="<f4").reshape(e["shape"])
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params, cfg
