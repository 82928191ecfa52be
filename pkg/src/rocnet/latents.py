"""RLAT1 latent-code files: magic, count u32, d_out u32, then little-endian f32."""

from __future__ import annotations

import struct

import numpy as np

from .voxel import PathOrFile, _open

MAGIC = b"RLAT"
VERSION = 1


def write_latents(codes: np.ndarray, destination: PathOrFile) -> None:
    codes = np.asarray(codes, dtype="<f4")
    if codes.ndim != 2:
        raise ValueError(f"latents must be [count, d_out], got {codes.shape}")
    with _open(destination, "wb") as f:
        f.write(MAGIC + struct.pack("<BII", VERSION, codes.shape[0], codes.shape[1]))
        f.write(codes.tobytes(order="C"))


def read_latents(source: PathOrFile) -> np.ndarray:
    with _open(source, "rb") as f:
        head = f.read(13)
        if len(head) < 13 or head[:4] != MAGIC:
            raise ValueError("bad magic, not an RLAT1 file")
        version, count, dim = struct.unpack("<BII", head[4:])
        if version != VERSION:
            raise ValueError(f"unsupported RLAT version {version}")
        raw = f.read(4 * count * dim)
        if len(raw) < 4 * count * dim:
            raise ValueError("truncated latent payload")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(count, dim)
