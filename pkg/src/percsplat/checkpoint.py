"""Binary checkpoint format.

Layout: ``PGSPLAT`` magic, u32 version, u64 count, then seven little-endian
float32 arrays (means, log_scales, rotations, colors, opacity_logits,
sensitivity_logits, max_view_weight), followed by a UTF-8 key=value block
holding the iteration number and the training configuration.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from percsplat.model import GaussianSet, TrainConfig, parse_key_values

MAGIC = b"PGSPLAT"
VERSION = 1
ARRAYS = (
    ("means", 3),
    ("log_scales", 3),
    ("rotations", 4),
    ("colors", 3),
    ("opacity_logits", 1),
    ("sensitivity_logits", 1),
    ("max_view_weight", 1),
)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    gaussians: GaussianSet
    iteration: int = 0
    config: Optional[TrainConfig] = None


def to_bytes(ckpt: Checkpoint) -> bytes:
    gs = ckpt.gaussians
    n = len(gs)
    parts = [MAGIC, struct.pack("<IQ", VERSION, n)]
    for name, width in ARRAYS:
        arr = np.ascontiguousarray(getattr(gs, name), dtype="<f4").reshape(n * width)
        parts.append(arr.tobytes())
    trailer = f"iteration={ckpt.iteration}\n"
    if ckpt.config is not None:
        trailer += ckpt.config.to_text()
    parts.append(trailer.encode("utf-8"))
    return b"".join(parts)


def from_bytes(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CheckpointError("bad magic: not a checkpoint file")
    off = len(MAGIC)
    if len(data) < off + 12:
        raise CheckpointError("truncated header")
    version, n = struct.unpack_from("<IQ", data, off)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += 12
    arrays = {}
    for name, width in ARRAYS:
        size = 4 * n * width
        if len(data) < off + size:
            raise CheckpointError(f"truncated array {name}")
        arr = np.frombuffer(data, dtype="<f4", count=n * width, offset=off).astype(np.float32)
        arrays[name] = arr.reshape(n, width) if width > 1 else arr
        off += size
    values = parse_key_values(data[off:].decode("utf-8"))
    iteration = int(values.pop("iteration", 0))
    config = TrainConfig.from_mapping(values) if values else None
    mvw = arrays.pop("max_view_weight")
    gs = GaussianSet(**arrays, max_view_weight=mvw)
    return Checkpoint(gs, iteration, config)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
