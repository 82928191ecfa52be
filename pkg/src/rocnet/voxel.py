"""Binary occupancy grids, the RVOX1 file format and reconstruction metrics."""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

VALID_SIDES = (4, 8, 16, 32, 64, 128, 256, 512)
MAGIC = b"RVOX"
VERSION = 1

PathOrFile = Union[str, os.PathLike, io.IOBase]


class GridFormatError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass(eq=False)
class VoxelGrid:
    """Cubic occupancy grid indexed ``occupancy[x, y, z]``."""

    occupancy: np.ndarray

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.ndim != 3 or not (occ.shape[0] == occ.shape[1] == occ.shape[2]):
            raise GridFormatError(f"occupancy must be a cube, got {occ.shape}")
        if occ.shape[0] not in VALID_SIDES:
            raise GridFormatError(f"side {occ.shape[0]} is not a supported power of two")
        self.occupancy = occ

    @classmethod
    def empty(cls, side: int) -> "VoxelGrid":
        return cls(np.zeros((side,) * 3, dtype=bool))

    @classmethod
    def full(cls, side: int) -> "VoxelGrid":
        return cls(np.ones((side,) * 3, dtype=bool))

    @property
    def side(self) -> int:
        return self.occupancy.shape[0]

    def count(self) -> int:
        return int(self.occupancy.sum())

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.side == other.side and bool(np.array_equal(self.occupancy, other.occupancy))

    def to_bytes(self) -> bytes:
        return np.packbits(self.occupancy.reshape(-1), bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, side: int, payload: bytes) -> "VoxelGrid":
        n = side ** 3
        need = (n + 7) // 8
        if len(payload) < need:
            raise GridFormatError(f"truncated payload: {len(payload)} of {need} bytes")
        bits = np.unpackbits(np.frombuffer(payload[:need], dtype=np.uint8), count=n, bitorder="little")
        return cls(bits.astype(bool).reshape(side, side, side))


def _open(target: PathOrFile, mode: str):
    if hasattr(target, "read") or hasattr(target, "write"):
        return _NoClose(target)
    return open(target, mode)


class _NoClose:
    def __init__(self, f):
        self.f = f

    def __enter__(self):
        return self.f

    def __exit__(self, *exc):
        return False


def save_grid(grid: VoxelGrid, destination: PathOrFile) -> None:
    with _open(destination, "wb") as f:
        f.write(MAGIC + struct.pack("<BI", VERSION, grid.side))
        f.write(grid.to_bytes())


def load_grid(source: PathOrFile) -> VoxelGrid:
    with _open(source, "rb") as f:
        header = f.read(9)
        if len(header) < 9 or header[:4] != MAGIC:
            raise GridFormatError("bad magic, not an RVOX1 file")
        version, side = struct.unpack("<BI", header[4:])
        if version != VERSION:
            raise GridFormatError(f"unsupported RVOX version {version}")
        if side not in VALID_SIDES:
            raise GridFormatError(f"side {side} is not a supported power of two")
        return VoxelGrid.from_bytes(side, f.read())


# ---------------------------------------------------------------------------
# synthetic shapes

SHAPE_KINDS = ("sphere", "box", "blob", "torus")


def _centers(side: int) -> tuple:
    c = (np.arange(side) + 0.5) / side
    return np.meshgrid(c, c, c, indexing="ij")


def random_params(kind: str, rng: np.random.Generator) -> dict:
    """Draw randomized shape parameters in normalized [0, 1] coordinates."""
    if kind == "sphere":
        r = rng.uniform(0.18, 0.42)
        return {"center": rng.uniform(0.5 - (0.48 - r), 0.5 + (0.48 - r), 3).tolist(), "radius": r}
    if kind == "box":
        half = rng.uniform(0.12, 0.4, 3)
        center = 0.5 + rng.uniform(-1, 1, 3) * (0.48 - half)
        return {"lo": (center - half).tolist(), "hi": (center + half).tolist()}
    if kind == "torus":
        major = rng.uniform(0.2, 0.3)
        minor = rng.uniform(0.07, min(0.14, major - 0.04))
        return {"center": (0.5 + rng.uniform(-0.03, 0.03, 3)).tolist(), "major": major,
                "minor": minor, "axis": int(rng.integers(3))}
    if kind == "blob":
        count = int(rng.integers(2, 5))
        spheres = []
        for _ in range(count):
            r = rng.uniform(0.1, 0.22)
            spheres.append({"center": rng.uniform(0.5 - (0.45 - r), 0.5 + (0.45 - r), 3).tolist(),
                            "radius": r})
        return {"spheres": spheres}
    raise ValueError(f"unknown shape kind {kind!r}")


def generate_synthetic(kind: str, side: int, params: Optional[dict] = None, seed: int = 0) -> VoxelGrid:
    """Rasterize a parametric solid; voxel centers inside the solid are set.

    Missing ``params`` are drawn from ``seed``. Coordinates are normalized so
    the grid spans the unit cube.
    """
    if params is None:
        params = random_params(kind, np.random.default_rng(seed))
    x, y, z = _centers(side)
    if kind == "sphere":
        r = float(params["radius"])
        if r <= 0:
            raise ValueError("sphere radius must be positive")
        cx, cy, cz = params.get("center", (0.5, 0.5, 0.5))
        occ = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= r * r
    elif kind == "box":
        lo = np.asarray(params.get("lo", (0, 0, 0)), dtype=float)
        hi = np.asarray(params.get("hi", (1, 1, 1)), dtype=float)
        if np.any(hi <= lo):
            raise ValueError("box must have positive extent on every axis")
        occ = (x >= lo[0]) & (x <= hi[0]) & (y >= lo[1]) & (y <= hi[1]) & (z >= lo[2]) & (z <= hi[2])
    elif kind == "torus":
        major, minor = float(params["major"]), float(params["minor"])
        if minor <= 0 or major <= 0:
            raise ValueError("torus radii must be positive")
        cx, cy, cz = params.get("center", (0.5, 0.5, 0.5))
        d = [x - cx, y - cy, z - cz]
        axis = int(params.get("axis", 2))
        a = d.pop(axis)
        ring = np.sqrt(d[0] ** 2 + d[1] ** 2) - major
        occ = ring ** 2 + a ** 2 <= minor * minor
    elif kind == "blob":
        spheres = params["spheres"]
        if not spheres:
            raise ValueError("blob needs at least one sphere")
        occ = np.zeros((side,) * 3, dtype=bool)
        for s in spheres:
            r = float(s["radius"])
            if r <= 0:
                raise ValueError("blob sphere radius must be positive")
            cx, cy, cz = s["center"]
            occ |= (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= r * r
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return VoxelGrid(occ)


def random_grid(side: int, density: float, rng: np.random.Generator) -> VoxelGrid:
    return VoxelGrid(rng.random((side,) * 3) < density)


# ---------------------------------------------------------------------------
# surface sampling

def exposed_faces(grid: VoxelGrid) -> np.ndarray:
    """Exposed faces as rows ``(x, y, z, axis, direction)``.

    A face is exposed when its voxel is occupied and the 6-neighbour across it
    is empty or outside the grid. ``direction`` is 0 for the low side and 1
    for the high side along ``axis``.
    """
    occ = grid.occupancy
    padded = np.pad(occ, 1)
    faces = []
    for axis in range(3):
        for direction, shift in ((0, -1), (1, 1)):
            neighbour = np.roll(padded, -shift, axis=axis)[1:-1, 1:-1, 1:-1]
            idx = np.argwhere(occ & ~neighbour)
            if len(idx):
                extra = np.tile([axis, direction], (len(idx), 1))
                faces.append(np.hstack([idx, extra]))
    if not faces:
        return np.zeros((0, 5), dtype=np.int64)
    return np.vstack(faces)


def _points_on_faces(faces: np.ndarray, side: int, rng: np.random.Generator) -> np.ndarray:
    uv = rng.random((len(faces), 2))
    pts = faces[:, :3].astype(float)
    axis = faces[:, 3]
    direction = faces[:, 4].astype(float)
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        pts[sel, a] += direction[sel]
        pts[sel, others[0]] += uv[sel, 0]
        pts[sel, others[1]] += uv[sel, 1]
    return pts / side


def surface_points(grid: VoxelGrid, samples_per_face: int = 1, seed: int = 0) -> np.ndarray:
    """Uniform samples on every exposed face, in unit-cube coordinates."""
    faces = exposed_faces(grid)
    if len(faces) == 0:
        raise EmptyInputError("grid has no occupied voxels")
    rng = np.random.default_rng(seed)
    return _points_on_faces(np.repeat(faces, samples_per_face, axis=0), grid.side, rng)


def sample_surface(grid: VoxelGrid, count: int = 2048, seed: int = 0) -> np.ndarray:
    """``count`` points drawn uniformly over the exposed surface area."""
    faces = exposed_faces(grid)
    if len(faces) == 0:
        raise EmptyInputError("grid has no occupied voxels")
    rng = np.random.default_rng(seed)
    chosen = faces[rng.integers(len(faces), size=count)]
    return _points_on_faces(chosen, grid.side, rng)


# ---------------------------------------------------------------------------
# metrics

def iou(a: VoxelGrid, b: VoxelGrid) -> float:
    if a.side != b.side:
        raise ValueError(f"grid sides differ: {a.side} vs {b.side}")
    union = np.count_nonzero(a.occupancy | b.occupancy)
    if union == 0:
        return 1.0
    return np.count_nonzero(a.occupancy & b.occupancy) / union


def chamfer(P: np.ndarray, G: np.ndarray) -> float:
    """Mean squared nearest-neighbour distance P->G plus G->P."""
    P = np.asarray(P, dtype=float)
    G = np.asarray(G, dtype=float)
    if len(P) == 0 or len(G) == 0:
        raise EmptyInputError("chamfer distance needs non-empty point sets")
    return float(_mean_nearest_sq(P, G) + _mean_nearest_sq(G, P))


def _mean_nearest_sq(src: np.ndarray, dst: np.ndarray) -> float:
    # squared distances recomputed from coordinates so ties resolve identically
    _, nearest = cKDTree(dst).query(src)
    return float(np.mean(((src - dst[nearest]) ** 2).sum(axis=1)))
