"""The recursive octree autoencoder.

Every node feature is a ``[C, 4, 4, 4]`` tensor (``C = feature_channels``).
Batched entry points take features with a leading batch axis; the plain
recursive path in :func:`encode_tree` walks one tree node by node.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .octree import NodeType, Octree, OctreeNode, octant_offset
from .tensor import RunningStats, Tensor
from .voxel import PathOrFile, _open

FEATURE_SIDE = 4
CKPT_MAGIC = b"ROCKPT"
CKPT_VERSION = 1

LEAF_TYPES = (NodeType.EMPTY, NodeType.FULL, NodeType.MIXED)
NON_MIXED = (NodeType.EMPTY, NodeType.FULL, NodeType.INTERIOR)


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    grid_side: int = 32
    leaf_side: int = 8
    feature_channels: int = 64
    merge_channels: int = 128
    latent_dim: int = 80
    n_classes: int = 0

    def __post_init__(self):
        for v in (self.grid_side, self.leaf_side):
            if v < FEATURE_SIDE or v & (v - 1):
                raise ValueError(f"sides must be powers of two >= {FEATURE_SIDE}, got {v}")
        if self.leaf_side > self.grid_side:
            raise ValueError("leaf side cannot exceed grid side")

    @property
    def levels(self) -> int:
        return int(np.log2(self.grid_side // self.leaf_side))

    @property
    def leaf_schedule(self) -> List[int]:
        """Output channels of each leaf-encoder stage, ending at ``feature_channels``."""
        stages = max(int(np.log2(self.leaf_side // FEATURE_SIDE)), 1)
        return [self.feature_channels >> (stages - 1 - i) for i in range(stages)]

    @property
    def name(self) -> str:
        return f"RocNet-{self.grid_side}-{self.leaf_side}"


# ---------------------------------------------------------------------------
# parameters

_SCOPES = {
    "encoder": ("leaf_enc.", "const.", "node_enc.", "tree_enc."),
    "decoder": ("tree_dec.", "node_dec.", "leaf_dec."),
    "classifier": ("classifier.", "head."),
}


class ParameterStore:
    """Named learnable tensors plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self.running: Dict[str, RunningStats] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # -- construction -----------------------------------------------------

    def _normal(self, shape, fan_in):
        return self._rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    def _add(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def _conv(self, name, c_in, c_out, k):
        self._add(name + ".weight", self._normal((c_out, c_in, k, k, k), c_in * k ** 3))
        self._add(name + ".bias", np.zeros(c_out))

    def _conv_t(self, name, c_in, c_out, k, stride):
        self._add(name + ".weight", self._normal((c_in, c_out, k, k, k), c_in * max(k // stride, 1) ** 3))
        self._add(name + ".bias", np.zeros(c_out))

    def _bn(self, name, channels):
        self._add(name + ".gamma", np.ones(channels))
        self._add(name + ".beta", np.zeros(channels))
        self.running[name] = RunningStats(channels, self.dtype)

    def _linear(self, name, d_in, d_out):
        self._add(name + ".weight", self._normal((d_out, d_in), d_in))
        self._add(name + ".bias", np.zeros(d_out))

    def _build(self):
        c = self.config
        F, M = c.feature_channels, c.merge_channels
        c_in = 1
        for i, c_out in enumerate(c.leaf_schedule):
            k = 3 if c.leaf_side == FEATURE_SIDE else 4
            self._conv(f"leaf_enc.{i}.conv", c_in, c_out, k)
            self._bn(f"leaf_enc.{i}.bn", c_out)
            c_in = c_out
        self._add("const.empty", np.zeros((F,) + (FEATURE_SIDE,) * 3))
        self._add("const.full", self._normal((F,) + (FEATURE_SIDE,) * 3, F))
        for level in range(1, c.levels + 1):
            p = f"node_enc.L{level}"
            for s in range(8):
                self._conv(f"{p}.phi{s}", F, M, 1)
                self._bn(f"{p}.phi{s}.bn", M)
            self._conv(f"{p}.psi", M, F, 1)
            self._bn(f"{p}.psi.bn", F)
        self._conv("tree_enc", F, c.latent_dim, FEATURE_SIDE)

        self._conv_t("tree_dec", c.latent_dim, F, FEATURE_SIDE, 1)
        for level in range(1, c.levels + 1):
            p = f"node_dec.L{level}"
            self._conv(f"{p}.parent", F, M, 1)
            self._bn(f"{p}.parent.bn", M)
            for s in range(8):
                self._conv(f"{p}.child{s}", M, F, 1)
                self._bn(f"{p}.child{s}.bn", F)
        dec = list(reversed(c.leaf_schedule[:-1])) + [1]
        c_in = F
        for i, c_out in enumerate(dec):
            if c.leaf_side == FEATURE_SIDE:
                self._conv_t(f"leaf_dec.{i}", c_in, c_out, 3, 1)
            else:
                self._conv_t(f"leaf_dec.{i}", c_in, c_out, 4, 2)
            if i < len(dec) - 1:
                self._bn(f"leaf_dec.{i}.bn", c_out)
            c_in = c_out

        self._conv("classifier.conv", F, c.latent_dim, FEATURE_SIDE)
        self._linear("classifier.fc", c.latent_dim, len(NodeType))
        if c.n_classes:
            self._linear("head.fc", c.latent_dim, c.n_classes)

    # -- access -----------------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, scope: str = "all") -> List[str]:
        if scope == "all":
            return list(self.params)
        prefixes = _SCOPES[scope]
        return [n for n in self.params if n.startswith(prefixes)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "ParameterStore":
        """Copy with every tensor and running statistic cast to ``dtype``."""
        clone = object.__new__(ParameterStore)
        clone.config = self.config
        clone.dtype = np.dtype(dtype)
        clone.params = {n: Tensor(p.data.astype(dtype), requires_grad=True, name=n) for n, p in self.params.items()}
        clone.running = {}
        for n, r in self.running.items():
            rs = RunningStats(len(r.mean), dtype)
            rs.mean[...] = r.mean
            rs.var[...] = r.var
            clone.running[n] = rs
        return clone

    def state(self) -> Dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.params.items()}
        for n, r in self.running.items():
            out[n + ".running_mean"] = r.mean
            out[n + ".running_var"] = r.var
        return out


def count_parameters(params: ParameterStore, scope: str = "all") -> int:
    return int(sum(params[n].data.size for n in params.names(scope)))


def level_block_size(config: ModelConfig) -> int:
    """Scalar parameters in one node-encoder level."""
    F, M = config.feature_channels, config.merge_channels
    return 8 * (F * M + M + 2 * M) + (M * F + F + 2 * F)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: ParameterStore, destination: PathOrFile) -> None:
    c = params.config
    state = params.state()
    with _open(destination, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<B", CKPT_VERSION))
        f.write(struct.pack("<6I", c.grid_side, c.leaf_side, c.feature_channels,
                            c.merge_channels, c.latent_dim, c.n_classes))
        f.write(struct.pack("<I", len(state)))
        for name, array in state.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)) + raw)
            T.write_tensor(f, array)


def load_checkpoint(source: PathOrFile) -> ParameterStore:
    with _open(source, "rb") as f:
        head = f.read(len(CKPT_MAGIC) + 1)
        if head[:len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise ValueError("bad magic, not a ROCKPT1 checkpoint")
        if head[-1] != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {head[-1]}")
        fields = struct.unpack("<6I", f.read(24))
        config = ModelConfig(*fields)
        (count,) = struct.unpack("<I", f.read(4))
        loaded = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", f.read(2))
            name = f.read(n).decode("utf-8")
            loaded[name] = T.read_tensor(f)
    dtype = next(iter(loaded.values())).dtype if loaded else np.float32
    params = ParameterStore(config, dtype=dtype)
    expected = params.state()
    missing = set(expected) - set(loaded)
    if missing:
        raise ValueError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
    for name, target in expected.items():
        if loaded[name].shape != target.shape:
            raise ValueError(f"tensor {name} has shape {loaded[name].shape}, expected {target.shape}")
        target[...] = loaded[name]
    return params


# ---------------------------------------------------------------------------
# forward context

@dataclass
class Pass:
    """Per-forward settings: batch-norm mode, statistics capture, counters."""

    training: bool = False
    record: Optional[Dict[str, tuple]] = None
    replay: Optional[Dict[str, tuple]] = None
    counters: Counter = field(default_factory=Counter)
    rng: Optional[np.random.Generator] = None


def _bn(ps: ParameterStore, name: str, x: Tensor, ctx: Pass) -> Tensor:
    stats = ctx.replay.get(name) if ctx.replay is not None else None
    rec = [] if ctx.record is not None else None
    out = T.batch_norm(x, ps[name + ".gamma"], ps[name + ".beta"], ps.running[name],
                       training=ctx.training, stats=stats, record=rec)
    if rec:
        ctx.record[name] = rec[0]
    return out


def _as_batch(x: Tensor) -> Tuple[Tensor, bool]:
    if x.data.ndim == 4:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch(x: Tensor, single: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if single else x


def _check_feature(ps: ParameterStore, x: Tensor) -> None:
    want = (ps.config.feature_channels,) + (FEATURE_SIDE,) * 3
    if x.shape[-4:] != want:
        raise T.DimensionError(f"node feature must be {want}, got {x.shape}")


# ---------------------------------------------------------------------------
# encoder

def leaf_encode(ps: ParameterStore, payload, ctx: Optional[Pass] = None) -> Tensor:
    """Encode ``[B, k, k, k]`` (or one ``[k, k, k]``) occupancy blocks."""
    ctx = ctx or Pass()
    k = ps.config.leaf_side
    arr = np.asarray(payload.data if isinstance(payload, Tensor) else payload)
    single = arr.ndim == 3
    if arr.shape[-3:] != (k, k, k):
        raise T.DimensionError(f"leaf payload must have side {k}, got {arr.shape}")
    x = Tensor(arr.reshape((-1, 1) + (k,) * 3).astype(ps.dtype))
    stride, pad = (1, 1) if k == FEATURE_SIDE else (2, 1)
    for i in range(len(ps.config.leaf_schedule)):
        x = T.conv3d(x, ps[f"leaf_enc.{i}.conv.weight"], ps[f"leaf_enc.{i}.conv.bias"], stride, pad)
        x = T.elu(_bn(ps, f"leaf_enc.{i}.bn", x, ctx))
    ctx.counters["leaf_encode"] += x.shape[0]
    return _unbatch(x, single)


def constant_leaf_feature(ps: ParameterStore, node_type: NodeType) -> Tensor:
    if node_type == NodeType.EMPTY:
        return ps["const.empty"]
    if node_type == NodeType.FULL:
        return ps["const.full"]
    raise ValueError(f"no constant feature for {NodeType(node_type).name}")


def node_encode(ps: ParameterStore, children: Sequence[Tensor], level: int, ctx: Optional[Pass] = None) -> Tensor:
    """Additive merge of eight child features into their parent's feature."""
    ctx = ctx or Pass()
    if len(children) != 8:
        raise ValueError(f"node_encode needs 8 children, got {len(children)}")
    if not 1 <= level <= ps.config.levels:
        raise ValueError(f"level {level} outside 1..{ps.config.levels}")
    p = f"node_enc.L{level}"
    lifted = []
    single = False
    for s, child in enumerate(children):
        _check_feature(ps, child)
        child, single = _as_batch(child)
        h = T.conv3d(child, ps[f"{p}.phi{s}.weight"], ps[f"{p}.phi{s}.bias"])
        lifted.append(T.elu(_bn(ps, f"{p}.phi{s}.bn", h, ctx)))
    merged = T.add_n(lifted)
    out = T.conv3d(merged, ps[f"{p}.psi.weight"], ps[f"{p}.psi.bias"])
    out = T.elu(_bn(ps, f"{p}.psi.bn", out, ctx))
    ctx.counters["node_encode"] += out.shape[0]
    return _unbatch(out, single)


def tree_encode(ps: ParameterStore, root_feature: Tensor) -> Tensor:
    """Flatten a root feature to the latent code (linear, no activation)."""
    _check_feature(ps, root_feature)
    x, single = _as_batch(root_feature)
    y = T.conv3d(x, ps["tree_enc.weight"], ps["tree_enc.bias"])
    y = T.reshape(y, (y.shape[0], ps.config.latent_dim))
    return T.reshape(y, (ps.config.latent_dim,)) if single else y


# ---------------------------------------------------------------------------
# decoder

def tree_decode(ps: ParameterStore, code: Tensor) -> Tensor:
    d = ps.config.latent_dim
    if code.shape[-1] != d or code.data.ndim not in (1, 2):
        raise T.DimensionError(f"latent code must have length {d}, got {code.shape}")
    single = code.data.ndim == 1
    x = T.reshape(code, (-1 if not single else 1, d, 1, 1, 1))
    y = T.elu(T.conv_transpose3d(x, ps["tree_dec.weight"], ps["tree_dec.bias"]))
    return _unbatch(y, single)


def node_decode(ps: ParameterStore, parent: Tensor, level: int, ctx: Optional[Pass] = None) -> List[Tensor]:
    """Split a parent feature into eight child features."""
    ctx = ctx or Pass()
    if not 1 <= level <= ps.config.levels:
        raise ValueError(f"level {level} outside 1..{ps.config.levels}")
    _check_feature(ps, parent)
    x, single = _as_batch(parent)
    p = f"node_dec.L{level}"
    h = T.conv3d(x, ps[f"{p}.parent.weight"], ps[f"{p}.parent.bias"])
    h = T.elu(_bn(ps, f"{p}.parent.bn", h, ctx))
    children = []
    for s in range(8):
        c = T.conv3d(h, ps[f"{p}.child{s}.weight"], ps[f"{p}.child{s}.bias"])
        children.append(_unbatch(T.elu(_bn(ps, f"{p}.child{s}.bn", c, ctx)), single))
    ctx.counters["node_decode"] += x.shape[0]
    return children


def leaf_decode(ps: ParameterStore, feature: Tensor, ctx: Optional[Pass] = None, logits: bool = False) -> Tensor:
    """Occupancy probabilities ``[B, k, k, k]`` (or ``[k, k, k]``) in (0, 1).

    With ``logits=True`` the final sigmoid is skipped.
    """
    ctx = ctx or Pass()
    _check_feature(ps, feature)
    x, single = _as_batch(feature)
    k = ps.config.leaf_side
    stages = len(ps.config.leaf_schedule)
    stride, pad = (1, 1) if k == FEATURE_SIDE else (2, 1)
    for i in range(stages):
        x = T.conv_transpose3d(x, ps[f"leaf_dec.{i}.weight"], ps[f"leaf_dec.{i}.bias"], stride, pad)
        if i < stages - 1:
            x = T.elu(_bn(ps, f"leaf_dec.{i}.bn", x, ctx))
        elif not logits:
            x = T.sigmoid(x)
    ctx.counters["leaf_decode"] += x.shape[0]
    x = T.reshape(x, (x.shape[0], k, k, k))
    return T.reshape(x, (k, k, k)) if single else x


def classify_node(ps: ParameterStore, feature: Tensor) -> Tensor:
    _check_feature(ps, feature)
    x, single = _as_batch(feature)
    y = T.elu(T.conv3d(x, ps["classifier.conv.weight"], ps["classifier.conv.bias"]))
    y = T.reshape(y, (y.shape[0], ps.config.latent_dim))
    logits = T.linear(y, ps["classifier.fc.weight"], ps["classifier.fc.bias"])
    return T.reshape(logits, (len(NodeType),)) if single else logits


def classification_head(ps: ParameterStore, code: Tensor, ctx: Optional[Pass] = None, rate: float = 0.5) -> Tensor:
    ctx = ctx or Pass()
    if "head.fc.weight" not in ps:
        raise ValueError("model was built without a classification head (n_classes=0)")
    x = T.dropout(code, rate, ctx.rng, ctx.training)
    return T.linear(x, ps["head.fc.weight"], ps["head.fc.bias"])


def guarded_types(logits: np.ndarray, depth: int, max_depth: int) -> np.ndarray:
    """Argmax node types with invalid choices for ``depth`` masked out."""
    masked = np.array(logits, dtype=np.float64, copy=True)
    if depth >= max_depth:
        masked[:, NodeType.INTERIOR] = -np.inf
    else:
        masked[:, NodeType.MIXED] = -np.inf
    return masked.argmax(axis=1)


# ---------------------------------------------------------------------------
# whole-tree encoding

def _check_tree(ps: ParameterStore, tree: Octree) -> None:
    c = ps.config
    if (tree.grid_side, tree.leaf_side) != (c.grid_side, c.leaf_side):
        raise ConfigMismatchError(
            f"tree is {tree.grid_side}/{tree.leaf_side}, model is {c.grid_side}/{c.leaf_side}")


def encode_tree(tree: Octree, ps: ParameterStore, ctx: Optional[Pass] = None) -> Tensor:
    """Bottom-up recursive encoding of a single tree to its latent code."""
    ctx = ctx or Pass()
    _check_tree(ps, tree)
    L = tree.max_depth

    def encode(node: OctreeNode) -> Tensor:
        if node.type in (NodeType.EMPTY, NodeType.FULL):
            ctx.counters["leaf_skip"] += 1
            return constant_leaf_feature(ps, node.type)
        if node.type == NodeType.MIXED:
            return leaf_encode(ps, node.payload, ctx)
        children = [encode(c) for c in node.children]
        return node_encode(ps, children, L - node.depth, ctx)

    return tree_encode(ps, encode(tree.root))


@dataclass
class BatchPlan:
    """Same-operation groups across a batch of trees.

    ``mixed`` lists every mixed leaf (one batched leaf-encoder call);
    ``levels[l]`` lists every interior node merged at level ``l`` (one batched
    node-encoder call per level).
    """

    trees: List[Octree]
    mixed: List[OctreeNode]
    levels: Dict[int, List[OctreeNode]]

    def group_sizes(self) -> Dict[str, int]:
        sizes = {"leaf_encode": len(self.mixed)}
        for level, nodes in sorted(self.levels.items()):
            sizes[f"node_encode.L{level}"] = len(nodes)
        return sizes


def dynamic_batch_plan(trees: Sequence[Octree]) -> BatchPlan:
    if not trees:
        raise ValueError("empty batch")
    key = (trees[0].grid_side, trees[0].leaf_side)
    mixed, levels = [], {}
    for tree in trees:
        if (tree.grid_side, tree.leaf_side) != key:
            raise ConfigMismatchError("all trees in a batch must share grid and leaf sides")
        L = tree.max_depth
        for node in tree.post_order():
            if node.type == NodeType.MIXED:
                mixed.append(node)
            elif node.type == NodeType.INTERIOR:
                levels.setdefault(L - node.depth, []).append(node)
    return BatchPlan(list(trees), mixed, levels)


def encode_batch(trees: Sequence[Octree], ps: ParameterStore, ctx: Optional[Pass] = None,
                 plan: Optional[BatchPlan] = None, features: Optional[dict] = None) -> Tensor:
    """Encode many trees with one batched call per operation group.

    Returns codes ``[len(trees), latent_dim]``. If ``features`` is a dict it
    receives ``id(node) -> (source tensor, row)`` for every node.
    """
    ctx = ctx or Pass()
    for t in trees:
        _check_tree(ps, t)
    plan = plan or dynamic_batch_plan(trees)
    sources: List[Tensor] = [T.reshape(ps["const.empty"], (1,) + ps["const.empty"].shape),
                             T.reshape(ps["const.full"], (1,) + ps["const.full"].shape)]
    where: Dict[int, Tuple[int, int]] = {}

    def ref(node):
        if node.type == NodeType.EMPTY:
            return (0, 0)
        if node.type == NodeType.FULL:
            return (1, 0)
        return where[id(node)]

    if plan.mixed:
        payloads = np.stack([n.payload for n in plan.mixed])
        sources.append(leaf_encode(ps, payloads, ctx))
        for row, node in enumerate(plan.mixed):
            where[id(node)] = (len(sources) - 1, row)
    for level in sorted(plan.levels):
        nodes = plan.levels[level]
        children = [T.gather_rows(sources, [ref(n.children[s]) for n in nodes]) for s in range(8)]
        sources.append(node_encode(ps, children, level, ctx))
        for row, node in enumerate(nodes):
            where[id(node)] = (len(sources) - 1, row)
    roots = T.gather_rows(sources, [ref(t.root) for t in trees])
    if features is not None:
        for t in trees:
            for node in t.post_order():
                s, r = ref(node)
                features[id(node)] = (sources[s], r)
    return tree_encode(ps, roots)


# ---------------------------------------------------------------------------
# whole-tree decoding

@dataclass
class DecodeResult:
    """Decoded trees plus the tensors the training losses need."""

    trees: List[Octree]
    logits: List[Tensor] = field(default_factory=list)
    label_targets: List[np.ndarray] = field(default_factory=list)
    leaf_logits: Optional[Tensor] = None
    leaf_targets: Optional[np.ndarray] = None
    visited: List[List[OctreeNode]] = field(default_factory=list)


def decode_batch(codes: Tensor, ps: ParameterStore, mode: str = "predicted",
                 references: Optional[Sequence[Octree]] = None, ctx: Optional[Pass] = None,
                 classify: Optional[bool] = None) -> DecodeResult:
    """Expand latent codes into octrees, one depth level at a time.

    ``mode="predicted"`` routes by the node classifier (with the depth guard);
    ``mode="known"`` routes by ``references`` (ignored in predicted mode).
    Classifier logits are kept when
    ``classify`` is true (default: always in predicted mode, and in known mode
    only while training).
    """
    ctx = ctx or Pass()
    c = ps.config
    L = c.levels
    if mode not in ("predicted", "known"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "known" and references is None:
        raise ValueError("known-topology decoding needs reference trees")
    if mode == "predicted":
        references = None
    if codes.data.ndim == 1:
        codes = T.reshape(codes, (1, codes.shape[0]))
    B = codes.shape[0]
    if references is not None:
        if len(references) != B:
            raise ValueError("one reference tree per latent code is required")
        for r in references:
            _check_tree(ps, r)
    if classify is None:
        classify = mode == "predicted" or ctx.training
    result = DecodeResult(trees=[])
    roots = [OctreeNode(NodeType.EMPTY, 0, (0, 0, 0)) for _ in range(B)]
    result.trees = [Octree(r, c.grid_side, c.leaf_side) for r in roots]
    # frontier entries: (output node, reference node or None)
    frontier = [(roots[b], references[b].root if references is not None else None) for b in range(B)]
    feats = tree_decode(ps, codes)
    mixed_feats, mixed_nodes, mixed_refs = [], [], []
    depth = 0
    while frontier:
        n = len(frontier)
        if references is not None:
            truth = np.array([int(r.type) for _, r in frontier])
        if classify:
            logits = classify_node(ps, feats)
            result.logits.append(logits)
            if references is not None:
                result.label_targets.append(truth)
        if mode == "known":
            types = truth
        else:
            types = guarded_types(logits.data, depth, L)
        interior = []
        mixed = []
        for i, (node, ref) in enumerate(frontier):
            node.type = NodeType(int(types[i]))
            node.depth = depth
            if node.type == NodeType.INTERIOR:
                interior.append(i)
            elif node.type == NodeType.MIXED:
                mixed.append(i)
        if mixed:
            mixed_feats.append(T.take_rows(feats, mixed) if len(mixed) < n else feats)
            mixed_nodes.extend(frontier[i][0] for i in mixed)
            mixed_refs.extend(frontier[i][1] for i in mixed)
        if not interior:
            break
        parents = T.take_rows(feats, interior) if len(interior) < n else feats
        children = node_decode(ps, parents, L - depth, ctx)
        half = (c.grid_side >> depth) // 2
        next_frontier = []
        for i in interior:
            node, _ = frontier[i]
            node.children = []
            for s in range(8):
                dx, dy, dz = octant_offset(s, half)
                origin = (node.origin[0] + dx, node.origin[1] + dy, node.origin[2] + dz)
                node.children.append(OctreeNode(NodeType.EMPTY, depth + 1, origin))
        for s in range(8):
            for i in interior:
                node, ref = frontier[i]
                next_frontier.append((node.children[s], ref.children[s] if ref is not None else None))
        feats = T.concat(children)
        frontier = next_frontier
        depth += 1
    if mixed_nodes:
        z = leaf_decode(ps, T.concat(mixed_feats) if len(mixed_feats) > 1 else mixed_feats[0], ctx, logits=True)
        result.leaf_logits = z
        for node, block in zip(mixed_nodes, z.data):
            node.payload = block > 0
        if references is not None and all(r is not None and r.type == NodeType.MIXED for r in mixed_refs):
            result.leaf_targets = np.stack([r.payload for r in mixed_refs])
    return result


def decode_tree(code: Tensor, ps: ParameterStore, mode: str = "predicted",
                reference: Optional[Octree] = None, ctx: Optional[Pass] = None) -> Octree:
    refs = [reference] if reference is not None else None
    return decode_batch(code, ps, mode, refs, ctx).trees[0]


def encode_grids(grids, ps: ParameterStore, batch_size: int = 50) -> np.ndarray:
    """Eval-mode latent codes ``[len(grids), latent_dim]`` for voxel grids."""
    from .octree import build
    out = []
    for start in range(0, len(grids), batch_size):
        trees = [build(g, ps.config.leaf_side) for g in grids[start:start + batch_size]]
        out.append(encode_batch(trees, ps, Pass(training=False)).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, ps.config.latent_dim), ps.dtype)
