"""Losses, optimizer and training loops."""

from __future__ import annotations

import contextlib
import csv
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .model import (
    ModelConfig,
    ParameterStore,
    Pass,
    classification_head,
    decode_batch,
    dynamic_batch_plan,
    encode_batch,
    save_checkpoint,
)
from .octree import NodeType, Octree, build
from .tensor import Tensor
from .voxel import VoxelGrid

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 50
    iterations: int = 300
    learning_rate: float = 1e-3
    alpha: float = 5.0
    seed: int = 0
    precision: str = "float32"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    checkpoint_every: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class LossReport:
    label_loss: float
    recon_loss: float
    total: float = 0.0
    confusion: np.ndarray = field(default_factory=lambda: np.zeros((4, 4), dtype=np.int64))
    mean_train_iou: Optional[float] = None

    def __post_init__(self):
        self.total = self.label_loss + self.recon_loss

    @property
    def node_accuracy(self) -> float:
        n = self.confusion.sum()
        return float(np.trace(self.confusion) / n) if n else 1.0


@contextlib.contextmanager
def thread_limits(threads: Optional[int] = None):
    """Cap BLAS threads per ``ROCNET_THREADS`` (0 means sequential)."""
    if threads is None:
        env = os.environ.get("ROCNET_THREADS")
        threads = int(env) if env not in (None, "") else None
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=max(threads, 1)):
        yield


# ---------------------------------------------------------------------------
# losses

def label_loss(tree: Octree, logits: Tensor) -> Tensor:
    """Summed 4-way cross-entropy; ``logits[i]`` scores the i-th post-order node."""
    targets = tree.codes()
    if logits.data.ndim != 2 or logits.shape[0] != len(targets):
        raise ValueError(f"need logits for all {len(targets)} nodes, got shape {logits.shape}")
    return T.softmax_cross_entropy(logits, targets)


def recon_loss(targets, outputs: Tensor, alpha: float = 5.0) -> Tensor:
    """Occupancy-weighted binary cross-entropy summed over all mixed-leaf voxels."""
    targets = np.asarray(targets)
    if targets.shape != outputs.shape:
        raise T.DimensionError(f"targets {targets.shape} vs outputs {outputs.shape}")
    return T.weighted_bce(outputs, targets, alpha)


def total_loss(trees: Sequence[Octree], ps: ParameterStore, alpha: float = 5.0,
               ctx: Optional[Pass] = None):
    """Teacher-forced autoencoding loss averaged over ``trees``.

    Returns ``(loss tensor, LossReport, DecodeResult)``.
    """
    ctx = ctx or Pass(training=True)
    codes = encode_batch(trees, ps, ctx)
    result = decode_batch(codes, ps, "known", trees, ctx, classify=True)
    zero = Tensor(np.zeros((), dtype=ps.dtype))
    label = T.add_n([T.softmax_cross_entropy(lg, tg) for lg, tg in zip(result.logits, result.label_targets)])
    if result.leaf_logits is not None:
        recon = T.weighted_bce_with_logits(result.leaf_logits, result.leaf_targets, alpha)
    else:
        recon = zero
    scale = 1.0 / len(trees)
    loss = T.scale(T.add(label, recon), scale)
    confusion = np.zeros((4, 4), dtype=np.int64)
    for lg, tg in zip(result.logits, result.label_targets):
        np.add.at(confusion, (tg, lg.data.argmax(axis=1)), 1)
    report = LossReport(label_loss=float(label.data) * scale, recon_loss=float(recon.data) * scale,
                        confusion=confusion)
    return loss, report, result


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Bias-corrected adaptive-moment updates over a fixed list of tensors."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"missing gradient for {p.name or p!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def optimizer_step(params: Sequence[Tensor], optimizer: Adam) -> None:
    optimizer.step()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)))
    if max_norm and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return norm


def _fill_missing_grads(params: Sequence[Tensor]) -> None:
    # parameters untouched by this batch (e.g. the full-leaf constant) get zero gradient
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# training loops

@dataclass
class FitResult:
    params: ParameterStore
    history: List[LossReport]
    seconds: float

    def write_csv(self, path) -> None:
        write_loss_csv(self.history, path)


def write_loss_csv(history: Sequence[LossReport], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "total", "label_loss", "recon_loss", "mean_train_iou"])
        for i, r in enumerate(history, start=1):
            iou_field = "" if r.mean_train_iou is None else repr(r.mean_train_iou)
            w.writerow([i, repr(r.total), repr(r.label_loss), repr(r.recon_loss), iou_field])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    if batch_size >= n:
        while True:
            yield np.arange(n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def fit(dataset: Sequence[VoxelGrid], model_config: ModelConfig, train_config: TrainConfig,
        out_dir=None, params: Optional[ParameterStore] = None,
        callback: Optional[Callable[[int, LossReport, ParameterStore], None]] = None) -> FitResult:
    """Train the autoencoder and node classifier on ``dataset``.

    Deterministic for a fixed seed when BLAS runs single-threaded.
    """
    if not dataset:
        raise ValueError("empty dataset")
    tc = train_config
    dtype = np.float64 if tc.precision == "float64" else np.float32
    ps = params or ParameterStore(model_config, seed=tc.seed, dtype=dtype)
    trees = [build(g, model_config.leaf_side) for g in dataset]
    names = ps.names("encoder") + ps.names("decoder") + [n for n in ps.names("classifier") if n.startswith("classifier.")]
    trainable = [ps[n] for n in names]
    opt = Adam(trainable, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
    rng = np.random.default_rng(tc.seed)
    batches = _batches(len(trees), tc.batch_size, rng)
    history: List[LossReport] = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    start = time.perf_counter()
    with thread_limits():
        for it in range(1, tc.iterations + 1):
            idx = next(batches)
            batch = [trees[i] for i in idx]
            ps.zero_grad()
            try:
                loss, report, _ = total_loss(batch, ps, tc.alpha, Pass(training=True, rng=rng))
            except T.NumericError as exc:
                raise TrainingDiverged(f"iteration {it}: {exc}") from None
            if not np.isfinite(report.total):
                raise TrainingDiverged(f"iteration {it}: loss is {report.total}")
            loss.backward()
            _fill_missing_grads(trainable)
            clip_grad_norm(trainable, tc.clip_norm)
            opt.step()
            if tc.eval_every and it % tc.eval_every == 0:
                from .evaluation import mean_iou
                report.mean_train_iou = mean_iou(ps, dataset, "predicted")
            history.append(report)
            if it % 50 == 0 or it == 1:
                logger.info("iter %d total %.4f label %.4f recon %.4f acc %.4f", it, report.total,
                            report.label_loss, report.recon_loss, report.node_accuracy)
            if callback is not None:
                callback(it, report, ps)
            if out_dir is not None and tc.checkpoint_every and it % tc.checkpoint_every == 0:
                save_checkpoint(ps, os.path.join(out_dir, f"checkpoint_{it:06d}.rockpt"))
    if out_dir is not None:
        save_checkpoint(ps, os.path.join(out_dir, "final.rockpt"))
        write_loss_csv(history, os.path.join(out_dir, "loss.csv"))
    return FitResult(ps, history, time.perf_counter() - start)


@dataclass
class ClassifierFit:
    params: ParameterStore
    losses: List[float]


def random_symmetry(grid: VoxelGrid, rng: np.random.Generator) -> VoxelGrid:
    """Apply one of the 48 symmetries of the cube (axis permutation plus flips)."""
    occ = np.transpose(grid.occupancy, rng.permutation(3))
    flips = tuple(a for a in range(3) if rng.random() < 0.5)
    if flips:
        occ = np.flip(occ, axis=flips)
    return VoxelGrid(np.ascontiguousarray(occ))


def fit_classifier(grids: Sequence[VoxelGrid], labels: Sequence[int], model_config: ModelConfig,
                   train_config: TrainConfig, augment: bool = True) -> ClassifierFit:
    """Train encoder plus classification head with cross-entropy.

    With ``augment`` each sample is re-drawn under a random cube symmetry
    every time it enters a batch.
    """
    if model_config.n_classes < 1:
        raise ValueError("model_config.n_classes must be set for classification")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= model_config.n_classes:
        raise ValueError("labels outside 0..n_classes-1")
    tc = train_config
    ps = ParameterStore(model_config, seed=tc.seed)
    trees = [build(g, model_config.leaf_side) for g in grids]
    trainable = [ps[n] for n in ps.names("encoder") + ["head.fc.weight", "head.fc.bias"]]
    opt = Adam(trainable, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
    rng = np.random.default_rng(tc.seed)
    batches = _batches(len(trees), tc.batch_size, rng)
    losses = []
    with thread_limits():
        for it in range(1, tc.iterations + 1):
            idx = next(batches)
            ps.zero_grad()
            ctx = Pass(training=True, rng=rng)
            if augment:
                batch = [build(random_symmetry(grids[i], rng), model_config.leaf_side) for i in idx]
            else:
                batch = [trees[i] for i in idx]
            codes = encode_batch(batch, ps, ctx)
            logits = classification_head(ps, codes, ctx)
            loss = T.scale(T.softmax_cross_entropy(logits, labels[idx]), 1.0 / len(idx))
            loss.backward()
            _fill_missing_grads(trainable)
            clip_grad_norm(trainable, tc.clip_norm)
            opt.step()
            losses.append(float(loss.data))
            if it % 50 == 0:
                logger.info("classifier iter %d loss %.4f", it, losses[-1])
    return ClassifierFit(ps, losses)


# ---------------------------------------------------------------------------
# resource measurement

@dataclass
class ResourceReport:
    peak_bytes: int
    seconds_per_iteration: float
    node_count: int
    mixed_count: int


def measure_resources(grids: Sequence[VoxelGrid], model_config: ModelConfig, iterations: int = 1,
                      alpha: float = 5.0, seed: int = 0, params: Optional[ParameterStore] = None) -> ResourceReport:
    """Peak live tensor bytes and wall time of training iterations on ``grids``.

    Parameters are allocated before tracking starts, so only activations and
    other per-iteration tensors are counted.
    """
    ps = params or ParameterStore(model_config, seed=seed)
    trees = [build(g, model_config.leaf_side) for g in grids]
    peak = 0
    start = time.perf_counter()
    for _ in range(iterations):
        ps.zero_grad()
        with T.track_memory() as tracker:
            loss, _, _ = total_loss(trees, ps, alpha, Pass(training=True))
            loss.backward()
            del loss
        peak = max(peak, tracker.peak)
    elapsed = (time.perf_counter() - start) / iterations
    plan = dynamic_batch_plan(trees)
    return ResourceReport(peak, elapsed, sum(t.node_count() for t in trees), len(plan.mixed))
