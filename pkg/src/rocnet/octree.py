"""Lossless octree codec over binary voxel grids.

Children are ordered by octant index with bit 0 selecting the upper x half,
bit 1 the upper y half and bit 2 the upper z half. Topology is stored as one
2-bit node code per node in post-order, mixed-leaf payloads separately in the
same visitation order.
"""

from __future__ import annotations

import enum
import io
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import numpy as np

from .voxel import PathOrFile, VoxelGrid, _open

MAGIC = b"ROCT"
VERSION = 1


class NodeType(enum.IntEnum):
    EMPTY = 0
    FULL = 1
    MIXED = 2
    INTERIOR = 3


class OctreeError(ValueError):
    pass


def octant_offset(index: int, half: int) -> tuple:
    return ((index & 1) * half, ((index >> 1) & 1) * half, ((index >> 2) & 1) * half)


@dataclass(eq=False)
class OctreeNode:
    type: NodeType
    depth: int
    origin: tuple
    children: Optional[List["OctreeNode"]] = None
    payload: Optional[np.ndarray] = None

    @property
    def is_leaf(self) -> bool:
        return self.type != NodeType.INTERIOR

    def __eq__(self, other):
        if not isinstance(other, OctreeNode):
            return NotImplemented
        if (self.type, self.depth, tuple(self.origin)) != (other.type, other.depth, tuple(other.origin)):
            return False
        if self.type == NodeType.MIXED and not np.array_equal(self.payload, other.payload):
            return False
        if self.type == NodeType.INTERIOR:
            return all(a == b for a, b in zip(self.children, other.children))
        return True


@dataclass(eq=False)
class Octree:
    root: OctreeNode
    grid_side: int
    leaf_side: int

    @property
    def max_depth(self) -> int:
        return int(np.log2(self.grid_side // self.leaf_side))

    def __eq__(self, other):
        if not isinstance(other, Octree):
            return NotImplemented
        return (self.grid_side, self.leaf_side) == (other.grid_side, other.leaf_side) and self.root == other.root

    def post_order(self) -> Iterator[OctreeNode]:
        stack = [(self.root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded or node.type != NodeType.INTERIOR:
                yield node
                continue
            stack.append((node, True))
            for child in reversed(node.children):
                stack.append((child, False))

    def nodes_by_depth(self) -> List[List[OctreeNode]]:
        levels = [[self.root]]
        while True:
            nxt = [c for n in levels[-1] if n.type == NodeType.INTERIOR for c in n.children]
            if not nxt:
                return levels
            levels.append(nxt)

    def node_count(self) -> int:
        return sum(1 for _ in self.post_order())

    def mixed_leaves(self) -> List[OctreeNode]:
        return [n for n in self.post_order() if n.type == NodeType.MIXED]

    def codes(self) -> List[int]:
        return [int(n.type) for n in self.post_order()]


def _check_sides(grid_side: int, leaf_side: int) -> None:
    def pow2(v):
        return v >= 1 and v & (v - 1) == 0

    if not (pow2(grid_side) and pow2(leaf_side)) or leaf_side > grid_side:
        raise OctreeError(f"leaf side {leaf_side} must be a power of two dividing grid side {grid_side}")


def build(grid: VoxelGrid, leaf_side: int) -> Octree:
    """Decompose ``grid`` until blocks are homogeneous or of side ``leaf_side``."""
    N = grid.side
    _check_sides(N, leaf_side)
    occ = grid.occupancy
    max_depth = int(np.log2(N // leaf_side))

    def make(origin, depth):
        size = N >> depth
        x, y, z = origin
        block = occ[x:x + size, y:y + size, z:z + size]
        if not block.any():
            return OctreeNode(NodeType.EMPTY, depth, origin)
        if block.all():
            return OctreeNode(NodeType.FULL, depth, origin)
        if depth == max_depth:
            return OctreeNode(NodeType.MIXED, depth, origin, payload=block.copy())
        half = size // 2
        children = []
        for i in range(8):
            dx, dy, dz = octant_offset(i, half)
            children.append(make((x + dx, y + dy, z + dz), depth + 1))
        return OctreeNode(NodeType.INTERIOR, depth, origin, children=children)

    return Octree(make((0, 0, 0), 0), N, leaf_side)


def to_voxels(tree: Octree) -> VoxelGrid:
    N, k = tree.grid_side, tree.leaf_side
    max_depth = tree.max_depth
    occ = np.zeros((N, N, N), dtype=bool)
    for node in tree.post_order():
        size = N >> node.depth
        x, y, z = node.origin
        if node.type == NodeType.FULL:
            occ[x:x + size, y:y + size, z:z + size] = True
        elif node.type == NodeType.MIXED:
            if node.depth != max_depth or node.payload is None or node.payload.shape != (k, k, k):
                raise OctreeError(f"malformed mixed leaf at depth {node.depth}")
            occ[x:x + k, y:y + k, z:z + k] = node.payload
        elif node.type == NodeType.INTERIOR:
            if node.depth >= max_depth or node.children is None or len(node.children) != 8:
                raise OctreeError(f"malformed interior node at depth {node.depth}")
    return VoxelGrid(occ)


def from_codes(codes, payloads, grid_side: int, leaf_side: int) -> Octree:
    """Rebuild a tree from post-order codes and mixed-leaf payloads."""
    _check_sides(grid_side, leaf_side)
    max_depth = int(np.log2(grid_side // leaf_side))
    payloads = list(payloads)
    stack: List[OctreeNode] = []
    used = 0
    for code in codes:
        t = NodeType(int(code))
        if t == NodeType.INTERIOR:
            if len(stack) < 8:
                raise OctreeError("topology underflow: interior code without 8 pending children")
            children = stack[-8:]
            del stack[-8:]
            stack.append(OctreeNode(t, -1, (0, 0, 0), children=children))
        elif t == NodeType.MIXED:
            if used >= len(payloads):
                raise OctreeError("more mixed leaves than payload blocks")
            stack.append(OctreeNode(t, -1, (0, 0, 0), payload=np.asarray(payloads[used], dtype=bool)))
            used += 1
        else:
            stack.append(OctreeNode(t, -1, (0, 0, 0)))
    if len(stack) != 1:
        raise OctreeError(f"topology stream leaves {len(stack)} roots")
    if used != len(payloads):
        raise OctreeError("unused payload blocks")

    def place(node, origin, depth):
        node.origin = origin
        node.depth = depth
        if node.type == NodeType.INTERIOR:
            if depth >= max_depth:
                raise OctreeError("interior node at maximum depth")
            half = (grid_side >> depth) // 2
            for i, child in enumerate(node.children):
                dx, dy, dz = octant_offset(i, half)
                place(child, (origin[0] + dx, origin[1] + dy, origin[2] + dz), depth + 1)
        elif node.type == NodeType.MIXED:
            if depth != max_depth:
                raise OctreeError("mixed leaf above maximum depth")
            if node.payload.shape != (leaf_side,) * 3:
                raise OctreeError(f"payload shape {node.payload.shape} does not match leaf side")

    place(stack[0], (0, 0, 0), 0)
    return Octree(stack[0], grid_side, leaf_side)


def pack_codes(codes) -> bytes:
    codes = np.asarray(codes, dtype=np.uint8)
    padded = np.zeros(-(-len(codes) // 4) * 4, dtype=np.uint8)
    padded[:len(codes)] = codes
    quads = padded.reshape(-1, 4)
    return (quads[:, 0] | quads[:, 1] << 2 | quads[:, 2] << 4 | quads[:, 3] << 6).astype(np.uint8).tobytes()


def unpack_codes(data: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    codes = np.stack([(raw >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)
    return codes[:count]


def serialize(tree: Octree, destination: PathOrFile) -> None:
    codes = tree.codes()
    mixed = tree.mixed_leaves()
    k = tree.leaf_side
    with _open(destination, "wb") as f:
        f.write(MAGIC + struct.pack("<BIIII", VERSION, tree.grid_side, k, len(codes), len(mixed)))
        f.write(pack_codes(codes))
        for leaf in mixed:
            f.write(np.packbits(leaf.payload.reshape(-1), bitorder="little").tobytes())


def deserialize(source: PathOrFile) -> Octree:
    with _open(source, "rb") as f:
        header = f.read(21)
        if len(header) < 21 or header[:4] != MAGIC:
            raise OctreeError("bad magic, not an ROCT1 file")
        version, N, k, node_count, mixed_count = struct.unpack("<BIIII", header[4:])
        if version != VERSION:
            raise OctreeError(f"unsupported ROCT version {version}")
        _check_sides(N, k)
        code_bytes = f.read(-(-node_count // 4))
        if len(code_bytes) < -(-node_count // 4):
            raise OctreeError("truncated topology stream")
        codes = unpack_codes(code_bytes, node_count)
        block = -(-k ** 3 // 8)
        payloads = []
        for _ in range(mixed_count):
            raw = f.read(block)
            if len(raw) < block:
                raise OctreeError("truncated mixed-leaf payload")
            bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=k ** 3, bitorder="little")
            payloads.append(bits.astype(bool).reshape(k, k, k))
    if int(np.count_nonzero(codes == NodeType.MIXED)) != mixed_count:
        raise OctreeError("mixed count in header disagrees with topology")
    return from_codes(codes, payloads, N, k)


def to_bytes(tree: Octree) -> bytes:
    buf = io.BytesIO()
    serialize(tree, buf)
    return buf.getvalue()


def from_bytes(data: bytes) -> Octree:
    return deserialize(io.BytesIO(data))


@dataclass
class OctreeStats:
    counts: dict
    depth_histogram: dict
    node_count: int
    mixed_fraction: float
    compression_ratio: float
    grid_side: int
    leaf_side: int
    by_type_depth: dict = field(default_factory=dict)

    def lines(self) -> List[str]:
        return [
            f"grid side: {self.grid_side}, leaf side: {self.leaf_side}",
            f"nodes: {self.node_count}, mixed: {self.counts[NodeType.MIXED]}",
            "types: " + ", ".join(f"{t.name.lower()}={self.counts[t]}" for t in NodeType),
            "depths: " + ", ".join(f"{d}={c}" for d, c in sorted(self.depth_histogram.items())),
            f"mixed-leaf fraction: {self.mixed_fraction:.4f}",
            f"compression ratio: {self.compression_ratio:.4f}",
        ]


def stats(tree: Octree) -> OctreeStats:
    counts = Counter({t: 0 for t in NodeType})
    depths: Counter = Counter()
    by_type_depth: Counter = Counter()
    for node in tree.post_order():
        counts[node.type] += 1
        depths[node.depth] += 1
        by_type_depth[(node.type, node.depth)] += 1
    n = sum(counts.values())
    leaves = n - counts[NodeType.INTERIOR]
    k = tree.leaf_side
    bits = 2 * n + k ** 3 * counts[NodeType.MIXED]
    return OctreeStats(
        counts=dict(counts),
        depth_histogram=dict(depths),
        node_count=n,
        mixed_fraction=counts[NodeType.MIXED] / leaves if leaves else 0.0,
        compression_ratio=tree.grid_side ** 3 / bits,
        grid_side=tree.grid_side,
        leaf_side=k,
        by_type_depth=dict(by_type_depth),
    )
