"""Reconstruction, classification, complexity and generation reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import (
    ConfigMismatchError,
    ModelConfig,
    ParameterStore,
    Pass,
    classification_head,
    count_parameters,
    decode_batch,
    encode_batch,
)
from .octree import NodeType, Octree, build, to_voxels
from .tensor import Tensor
from .voxel import EmptyInputError, VoxelGrid, chamfer, iou, sample_surface

CHAMFER_DISPLAY_SCALE = 1e3


def _check_grids(ps: ParameterStore, grids: Sequence[VoxelGrid]) -> None:
    for g in grids:
        if g.side != ps.config.grid_side:
            raise ConfigMismatchError(f"grid side {g.side} does not match model side {ps.config.grid_side}")


def reconstruct(ps: ParameterStore, grids: Sequence[VoxelGrid], mode: str = "predicted",
                batch_size: int = 50) -> Tuple[List[Octree], List[Octree]]:
    """Encode and decode in eval mode; returns (source trees, decoded trees)."""
    _check_grids(ps, grids)
    sources, decoded = [], []
    for start in range(0, len(grids), batch_size):
        trees = [build(g, ps.config.leaf_side) for g in grids[start:start + batch_size]]
        codes = encode_batch(trees, ps, Pass(training=False))
        result = decode_batch(Tensor(codes.data), ps, mode, trees, Pass(training=False))
        sources.extend(trees)
        decoded.extend(result.trees)
    return sources, decoded


def decode_codes(ps: ParameterStore, codes: np.ndarray, batch_size: int = 50) -> List[VoxelGrid]:
    codes = np.asarray(codes, dtype=ps.dtype)
    out = []
    for start in range(0, len(codes), batch_size):
        result = decode_batch(Tensor(codes[start:start + batch_size]), ps, "predicted", ctx=Pass(training=False))
        out.extend(to_voxels(t) for t in result.trees)
    return out


def topology_accuracy(truth: Octree, predicted: Octree) -> float:
    """Fraction of ground-truth nodes whose co-located decoded node has the same type."""
    found = {(n.depth, tuple(n.origin)): n.type for n in predicted.post_order()}
    nodes = list(truth.post_order())
    hits = sum(1 for n in nodes if found.get((n.depth, tuple(n.origin))) == n.type)
    return hits / len(nodes)


def mean_iou(ps: ParameterStore, grids: Sequence[VoxelGrid], mode: str = "predicted") -> float:
    _, decoded = reconstruct(ps, grids, mode)
    return float(np.mean([iou(g, to_voxels(t)) for g, t in zip(grids, decoded)]))


@dataclass
class EvalReport:
    mode: str
    iou: List[float] = field(default_factory=list)
    chamfer: List[float] = field(default_factory=list)
    topology_accuracy: List[float] = field(default_factory=list)

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou)) if self.iou else float("nan")

    @property
    def mean_chamfer(self) -> float:
        vals = [c for c in self.chamfer if not math.isnan(c)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_topology_accuracy(self) -> float:
        return float(np.mean(self.topology_accuracy)) if self.topology_accuracy else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample", "mode", "iou", "chamfer_x1e3", "topology_accuracy"])
            for i, (a, c, t) in enumerate(zip(self.iou, self.chamfer, self.topology_accuracy)):
                w.writerow([i, self.mode, repr(a), repr(c * CHAMFER_DISPLAY_SCALE), repr(t)])
            w.writerow(["mean", self.mode, repr(self.mean_iou),
                        repr(self.mean_chamfer * CHAMFER_DISPLAY_SCALE), repr(self.mean_topology_accuracy)])

    def table(self) -> str:
        lines = [f"mode: {self.mode}", f"{'sample':>6} | {'IoU':>7} | {'CD x1e3':>9} | {'topo acc':>8}"]
        for i, (a, c, t) in enumerate(zip(self.iou, self.chamfer, self.topology_accuracy)):
            lines.append(f"{i:>6} | {a:7.4f} | {c * CHAMFER_DISPLAY_SCALE:9.4f} | {t:8.4f}")
        lines.append(f"{'mean':>6} | {self.mean_iou:7.4f} | {self.mean_chamfer * CHAMFER_DISPLAY_SCALE:9.4f} | "
                     f"{self.mean_topology_accuracy:8.4f}")
        return "\n".join(lines)


def eval_reconstruction(ps: ParameterStore, grids: Sequence[VoxelGrid], mode: str = "predicted",
                        chamfer_points: int = 2048, seed: int = 0) -> EvalReport:
    """IoU, Chamfer and topology accuracy of eval-mode reconstructions.

    Chamfer is NaN for a sample whose source or reconstruction is empty.
    """
    sources, decoded = reconstruct(ps, grids, mode)
    report = EvalReport(mode)
    for i, (g, src, out) in enumerate(zip(grids, sources, decoded)):
        recon = to_voxels(out)
        report.iou.append(iou(g, recon))
        try:
            P = sample_surface(recon, chamfer_points, seed + 2 * i)
            G = sample_surface(g, chamfer_points, seed + 2 * i + 1)
            report.chamfer.append(chamfer(P, G))
        except EmptyInputError:
            report.chamfer.append(float("nan"))
        report.topology_accuracy.append(1.0 if mode == "known" else topology_accuracy(src, out))
    return report


def predict_classes(ps: ParameterStore, grids: Sequence[VoxelGrid], batch_size: int = 50) -> np.ndarray:
    _check_grids(ps, grids)
    preds = []
    for start in range(0, len(grids), batch_size):
        trees = [build(g, ps.config.leaf_side) for g in grids[start:start + batch_size]]
        ctx = Pass(training=False)
        logits = classification_head(ps, encode_batch(trees, ps, ctx), ctx)
        preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def eval_classification(ps: ParameterStore, grids: Sequence[VoxelGrid], labels: Sequence[int]) -> float:
    labels = np.asarray(labels)
    if len(labels) != len(grids):
        raise ValueError("one label per grid is required")
    if labels.size and (labels.min() < 0 or labels.max() >= ps.config.n_classes):
        raise ValueError("labels outside the model's classes")
    return float(np.mean(predict_classes(ps, grids) == labels))


def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> Tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(order[:cut]), np.sort(order[cut:])


# ---------------------------------------------------------------------------
# complexity

@dataclass
class ComplexityRow:
    name: str
    grid_side: int
    leaf_side: int
    levels: int
    encoder_params: int
    total_params: int
    predicted_memory_scale: int
    peak_bytes: Optional[int] = None
    seconds_per_iteration: Optional[float] = None


@dataclass
class ComplexityReport:
    rows: List[ComplexityRow]
    slope: float
    intercept: float
    residuals: List[float]

    def table(self) -> str:
        lines = [f"{'model':<16} | {'encoder':>10} | {'total':>10} | {'(N/k)^3':>8}"]
        for r in self.rows:
            extra = ""
            if r.peak_bytes is not None:
                extra = f" | {r.peak_bytes / 2 ** 20:9.2f} MiB | {r.seconds_per_iteration:7.3f} s/it"
            lines.append(f"{r.name:<16} | {r.encoder_params:>10} | {r.total_params:>10} | "
                         f"{r.predicted_memory_scale:>8}{extra}")
        lines.append(f"encoder params = {self.slope:.1f} * log2(N/k) + {self.intercept:.1f}; "
                     f"max |residual| = {max(abs(x) for x in self.residuals) if self.residuals else 0.0:g}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model", "grid_side", "leaf_side", "levels", "encoder_params", "total_params",
                        "predicted_memory_scale", "peak_bytes", "seconds_per_iteration", "fit_residual"])
            for r, res in zip(self.rows, self.residuals):
                w.writerow([r.name, r.grid_side, r.leaf_side, r.levels, r.encoder_params, r.total_params,
                            r.predicted_memory_scale, "" if r.peak_bytes is None else r.peak_bytes,
                            "" if r.seconds_per_iteration is None else repr(r.seconds_per_iteration), repr(res)])


def affine_fit(x: Sequence[int], y: Sequence[int]) -> Tuple[float, float, List[float]]:
    """Exact least-squares line through integer points using rational arithmetic."""
    from fractions import Fraction
    n = len(x)
    if n < 2:
        return 0.0, float(y[0]) if n else 0.0, [0.0] * n
    sx, sy = sum(x), sum(y)
    sxx = sum(v * v for v in x)
    sxy = sum(a * b for a, b in zip(x, y))
    denom = n * sxx - sx * sx
    slope = Fraction(n * sxy - sx * sy, denom)
    intercept = Fraction(sy, n) - slope * Fraction(sx, n)
    residuals = [float(b - (slope * a + intercept)) for a, b in zip(x, y)]
    return float(slope), float(intercept), residuals


def complexity_report(configs: Sequence[Tuple[int, int]], measure: bool = False,
                      measure_density: float = 0.5, seed: int = 0) -> ComplexityReport:
    """Parameter counts per RocNet-N-k plus the affine law in log2(N/k).

    With ``measure`` each config also runs one training iteration on a dense
    random grid to record peak tensor memory and time.
    """
    from .training import measure_resources
    from .voxel import random_grid
    rows = []
    for N, k in configs:
        cfg = ModelConfig(grid_side=N, leaf_side=k)
        ps = ParameterStore(cfg, seed=seed)
        row = ComplexityRow(cfg.name, N, k, cfg.levels, count_parameters(ps, "encoder"),
                            count_parameters(ps, "all"), (N // k) ** 3)
        if measure:
            grid = random_grid(N, measure_density, np.random.default_rng(seed))
            res = measure_resources([grid], cfg, params=ps)
            row.peak_bytes, row.seconds_per_iteration = res.peak_bytes, res.seconds_per_iteration
        rows.append(row)
    slope, intercept, residuals = affine_fit([r.levels for r in rows], [r.encoder_params for r in rows])
    return ComplexityReport(rows, slope, intercept, residuals)


# ---------------------------------------------------------------------------
# generation

@dataclass
class GenerationResult:
    grids: List[VoxelGrid]
    codes: np.ndarray
    weights: np.ndarray
    nearest: np.ndarray


def sample_hull_codes(latents: np.ndarray, count: int, seed: int = 0,
                      concentration: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Convex combinations of ``latents`` with symmetric-Dirichlet weights."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or len(latents) < 2:
        raise ValueError("need at least 2 training latents")
    rng = np.random.default_rng(seed)
    weights = rng.dirichlet(np.full(len(latents), concentration), size=count)
    return weights @ latents, weights


def nearest_latent(codes: np.ndarray, latents: np.ndarray) -> np.ndarray:
    d = ((np.asarray(codes)[:, None, :] - np.asarray(latents)[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def generate_samples(ps: ParameterStore, latents: np.ndarray, count: int, seed: int = 0,
                     weights: Optional[np.ndarray] = None) -> GenerationResult:
    """Decode random points of the training latents' convex hull in predicted mode.

    Explicit ``weights`` (rows on the simplex) replace the Dirichlet draw.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or len(latents) < 2:
        raise ValueError("need at least 2 training latents")
    if weights is None:
        codes, weights = sample_hull_codes(latents, count, seed)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        codes = weights @ latents
    grids = decode_codes(ps, codes)
    return GenerationResult(grids, codes, weights, nearest_latent(codes, latents))
