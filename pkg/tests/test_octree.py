import io
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rocnet.octree import (
    NodeType,
    Octree,
    OctreeError,
    OctreeNode,
    build,
    deserialize,
    from_bytes,
    from_codes,
    pack_codes,
    serialize,
    stats,
    to_bytes,
    to_voxels,
    unpack_codes,
)
from rocnet.voxel import VoxelGrid, generate_synthetic, random_grid

E, F, M, I = (int(t) for t in NodeType)


def clustered_grid(side, rng):
    """Random grid with homogeneous regions at several scales."""
    occ = np.zeros((side,) * 3, dtype=bool)
    for _ in range(rng.integers(1, 6)):
        lo = rng.integers(0, side, 3)
        size = rng.integers(1, side // 2 + 1, 3)
        occ[lo[0]:lo[0] + size[0], lo[1]:lo[1] + size[1], lo[2]:lo[2] + size[2]] = rng.random() < 0.8
    noise = rng.random(occ.shape) < rng.choice([0.0, 0.001, 0.01])
    return VoxelGrid(occ ^ noise)


def test_node_type_values():
    assert [(t.name, int(t)) for t in NodeType] == [("EMPTY", 0), ("FULL", 1), ("MIXED", 2), ("INTERIOR", 3)]


def test_empty_and_full_roots():
    for grid, kind in ((VoxelGrid.empty(32), NodeType.EMPTY), (VoxelGrid.full(32), NodeType.FULL)):
        tree = build(grid, 8)
        assert tree.root.type == kind
        assert tree.node_count() == 1
        assert tree.codes() == [int(kind)]


def test_one_voxel_example(one_voxel_grid):
    tree = build(one_voxel_grid, 4)
    root = tree.root
    assert root.type == NodeType.INTERIOR
    assert [c.type for c in root.children].count(NodeType.EMPTY) == 7
    # voxel (5, 9, 2): x low, y high, z low -> octant 2
    child = root.children[2]
    assert child.type == NodeType.INTERIOR and child.origin == (0, 8, 0)
    assert [c.type for c in child.children].count(NodeType.EMPTY) == 7
    leaf = child.children[1]
    assert leaf.type == NodeType.MIXED and leaf.origin == (4, 8, 0) and leaf.depth == 2
    assert leaf.payload.sum() == 1 and leaf.payload[1, 1, 2]
    assert tree.node_count() == 17
    assert to_voxels(tree) == one_voxel_grid


def test_post_order_trace():
    occ = np.zeros((16, 16, 16), dtype=bool)
    occ[0, 0, 0] = True
    codes = build(VoxelGrid(occ), 4).codes()
    assert codes == [M] + [E] * 7 + [I] + [E] * 7 + [I]
    assert len(codes) == 17


def test_post_order_trace_middle_octant(one_voxel_grid):
    codes = build(one_voxel_grid, 4).codes()
    grandchildren = [E, M] + [E] * 6
    assert codes == [E, E] + grandchildren + [I] + [E] * 5 + [I]


def test_full_leaf_tree_to_voxels():
    tree = Octree(OctreeNode(NodeType.FULL, 0, (0, 0, 0)), 16, 4)
    assert to_voxels(tree) == VoxelGrid.full(16)


def test_n_equals_k_root_is_mixed(rng):
    g = random_grid(8, 0.5, rng)
    tree = build(g, 8)
    assert tree.root.type == NodeType.MIXED
    assert from_bytes(to_bytes(tree)) == tree


def test_invalid_leaf_side():
    with pytest.raises(OctreeError):
        build(VoxelGrid.empty(16), 32)
    with pytest.raises(OctreeError):
        build(VoxelGrid.empty(16), 3)


def test_malformed_tree_rejected():
    leaf = OctreeNode(NodeType.EMPTY, 1, (0, 0, 0))
    bad = Octree(OctreeNode(NodeType.INTERIOR, 0, (0, 0, 0), children=[leaf] * 8), 8, 8)
    with pytest.raises(OctreeError):
        to_voxels(bad)


def walk(node):
    yield node
    for c in node.children or ():
        yield from walk(c)


def check_invariants(tree):
    L = tree.max_depth
    for node in walk(tree.root):
        if node.type == NodeType.MIXED:
            assert node.depth == L
        if node.type == NodeType.INTERIOR:
            assert node.depth < L
            kinds = {c.type for c in node.children}
            assert kinds not in ({NodeType.EMPTY}, {NodeType.FULL})
    # each split replaces one leaf with an interior node plus 8 children
    assert tree.node_count() % 8 == 1
    assert len(tree.mixed_leaves()) <= (tree.grid_side // tree.leaf_side) ** 3
    assert len(tree.codes()) == tree.node_count()


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 20), side=st.sampled_from([16, 32, 64]), k=st.sampled_from([4, 8, 16]))
def test_round_trips(seed, side, k):
    rng = np.random.default_rng(seed)
    g = clustered_grid(side, rng) if seed % 2 else random_grid(side, rng.uniform(0, 0.02), rng)
    tree = build(g, k)
    check_invariants(tree)
    assert to_voxels(tree) == g
    assert from_bytes(to_bytes(tree)) == tree


def test_serialized_layout(one_voxel_grid):
    tree = build(one_voxel_grid, 4)
    data = to_bytes(tree)
    assert data[:4] == b"ROCT" and data[4] == 1
    header = np.frombuffer(data[5:21], dtype="<u4")
    assert header.tolist() == [16, 4, 17, 1]
    assert len(data) == 21 + 5 + 8
    assert unpack_codes(data[21:26], 17).tolist() == tree.codes()


def test_pack_codes_lsb_first():
    assert pack_codes([1, 2, 3, 0, 3]) == bytes([0b00111001, 0b11])
    np.testing.assert_array_equal(unpack_codes(pack_codes([3, 2, 1]), 3), [3, 2, 1])


def test_single_empty_stream():
    tree = from_bytes(to_bytes(build(VoxelGrid.empty(16), 4)))
    assert tree.codes() == [E]


def test_from_codes_errors():
    block = np.ones((4, 4, 4), dtype=bool)
    with pytest.raises(OctreeError):
        from_codes([E, E, I], [], 16, 4)            # underflow
    with pytest.raises(OctreeError):
        from_codes([E, E], [], 16, 4)               # two roots
    with pytest.raises(OctreeError):
        from_codes([M], [], 16, 4)                  # missing payload
    with pytest.raises(OctreeError):
        from_codes([M] + [E] * 7 + [I], [block], 16, 4)  # mixed leaf above max depth


def test_truncated_file(one_voxel_grid):
    data = to_bytes(build(one_voxel_grid, 4))
    with pytest.raises(OctreeError):
        from_bytes(data[:-1])
    with pytest.raises(OctreeError):
        from_bytes(b"XXXX" + data[4:])


def test_file_path_round_trip(tmp_path, one_voxel_grid):
    tree = build(one_voxel_grid, 4)
    serialize(tree, tmp_path / "t.roct")
    assert deserialize(tmp_path / "t.roct") == tree


def test_stats_empty():
    s = stats(build(VoxelGrid.empty(32), 8))
    assert s.counts[NodeType.EMPTY] == 1 and s.node_count == 1
    assert s.compression_ratio == 32 ** 3 / 2
    assert "nodes: 1, mixed: 0" in s.lines()


def test_stats_one_voxel(one_voxel_grid):
    s = stats(build(one_voxel_grid, 4))
    assert s.counts == {NodeType.EMPTY: 14, NodeType.FULL: 0, NodeType.MIXED: 1, NodeType.INTERIOR: 2}
    assert s.compression_ratio == 16 ** 3 / (2 * 17 + 4 ** 3 * 1)
    assert s.depth_histogram == {0: 1, 1: 8, 2: 8}


def test_sphere_mixed_leaves_are_sparse():
    g = generate_synthetic("sphere", 64, {"center": (0.5, 0.5, 0.5), "radius": 0.4})
    s = stats(build(g, 8))
    assert s.mixed_fraction < 0.5


def test_codec_acceptance_scale():
    # the acceptance suite runs 200 grids; this keeps the unit run quick
    rng = np.random.default_rng(99)
    start = time.perf_counter()
    for i in range(40):
        side = [16, 32, 64][i % 3]
        k = [4, 8, 16][(i // 3) % 3]
        g = clustered_grid(side, rng)
        t = build(g, k)
        assert to_voxels(t) == g and from_bytes(to_bytes(t)) == t
    assert time.perf_counter() - start < 30
