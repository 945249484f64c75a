"""Writer for the `SEMB` embedding container.

Format (little-endian): magic ``SEMB`` | version u32=1 | n_layers u32 |
n_frames u32 | dim u32 | frame_rate_hz f32 | float32 payload in
layer-major, then frame-major order. This mirrors the downstream
toolkit's on-disk interface; conformance is asserted in the tests by
reading every emitted file back through that toolkit's reader.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"SEMB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIf")


def write_semb(path: str | os.PathLike, data: np.ndarray, frame_rate_hz: float) -> None:
    """Write a (layers, frames, dim) float32 tensor atomically."""
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 3 or min(data.shape) < 1:
        raise ValueError(f"embedding tensor must be (layers, frames, dim), got {data.shape}")
    if not frame_rate_hz > 0:
        raise ValueError(f"frame rate must be positive, got {frame_rate_hz}")
    path = os.fspath(path)
    header = _HEADER.pack(MAGIC, VERSION, data.shape[0], data.shape[1], data.shape[2],
                          float(frame_rate_hz))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
    os.replace(tmp, path)


def read_semb(path: str | os.PathLike) -> tuple[np.ndarray, float]:
    """Minimal reader used for self-checks; the downstream reader is authoritative."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n_layers, n_frames, dim, frame_rate = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise ValueError(f"{path}: not a version-{VERSION} SEMB file")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(n_layers, n_frames, dim).copy(), frame_rate
