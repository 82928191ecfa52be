"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_error:.2e} (tol {self.tolerance:.0e})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Dict[str, Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    name: str = "op",
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare autodiff gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the graph from ``inputs`` on each call and return a
    scalar tensor. Inputs should be float64. When ``max_entries`` is set, only
    that many randomly chosen coordinates of each input are perturbed.
    Failures are reported, never raised.

    Central differences carry round-off of order ``eps * |f| / h``, so the
    relative-error floor is raised to ``1e5 * eps * |f| / h`` when that
    exceeds ``floor``. Near-zero gradients (for example a bias feeding a
    training-mode batch norm) are then judged against what the numeric
    estimate can resolve.
    """
    if not 1e-5 <= h <= 1e-4:
        raise ValueError(f"step size {h} outside [1e-5, 1e-4]")
    rng = rng or np.random.default_rng(0)
    for t in inputs.values():
        t.grad = None
    out = fn()
    out.backward()
    noise = 1e5 * np.finfo(np.float64).eps * abs(float(out.data)) / h
    floor = max(floor, noise)
    report = GradCheckReport(name=name, tolerance=tolerance)
    for key, t in inputs.items():
        analytic_full = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n)
        if max_entries is not None and n > max_entries:
            idx = rng.choice(n, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        report.errors[key] = relative_error(analytic_full.reshape(-1)[idx], numeric, floor)
    return report


def check_all(reports: Sequence[GradCheckReport]) -> bool:
    return all(r.passed for r in reports)


# ---------------------------------------------------------------------------
# the full suite used by the CLI and the acceptance tests

def _leaf(rng, *shape, low=None):
    data = rng.normal(size=shape)
    if low is not None:
        # keep ELU inputs away from the kink at 0
        data = np.where(np.abs(data) < low, np.sign(data + 1e-12) * (low + np.abs(data)), data)
    return Tensor(data, requires_grad=True)


def op_checks(seed: int = 0, tolerance: float = 1e-4) -> List[GradCheckReport]:
    """Finite-difference checks of every differentiable tensor operation."""
    from . import tensor as T

    rng = np.random.default_rng(seed)
    reports = []

    def check(name, fn, **inputs):
        reports.append(grad_check(fn, inputs, tolerance=tolerance, name=name, rng=rng))

    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    c = _leaf(rng, 2, 4)
    check("add", lambda: T.tsum(T.mul(T.add(a, b), a)), a=a, b=b)
    check("add_n", lambda: T.tsum(T.mul(T.add_n([a, b, a]), b)), a=a, b=b)
    check("mul", lambda: T.tsum(T.mul(a, b)), a=a, b=b)
    check("scale", lambda: T.tsum(T.mul(T.scale(a, -2.5), a)), a=a)
    check("reshape", lambda: T.tsum(T.mul(T.reshape(a, (4, 3)), T.reshape(b, (4, 3)))), a=a, b=b)
    check("concat", lambda: T.tsum(T.mul(T.concat([a, c]), T.concat([b, c]))), a=a, b=b, c=c)
    check("gather_rows", lambda: T.tsum(T.mul(T.gather_rows([a, c], [(0, 2), (1, 0), (0, 2)]),
                                              T.gather_rows([b, b], [(0, 0), (1, 1), (0, 2)]))),
          a=a, b=b, c=c)
    check("take_rows", lambda: T.tsum(T.mul(T.take_rows(a, [2, 0, 2]), T.take_rows(b, [0, 1, 2]))), a=a, b=b)

    x = _leaf(rng, 2, 3, 3, low=1e-3)
    w = Tensor(rng.normal(size=x.shape))
    check("elu", lambda: T.tsum(T.mul(T.elu(x), w)), x=x)
    check("sigmoid", lambda: T.tsum(T.mul(T.sigmoid(x), w)), x=x)
    check("dropout", lambda: T.tsum(T.mul(T.dropout(x, 0.5, np.random.default_rng(7), True), w)), x=x)

    W, bias = _leaf(rng, 3, 5), _leaf(rng, 3)
    v, V = _leaf(rng, 5), _leaf(rng, 4, 5)
    check("linear", lambda: T.tsum(T.mul(T.linear(v, W, bias), T.linear(v, W, bias))), v=v, W=W, bias=bias)
    check("linear_batched", lambda: T.softmax_cross_entropy(T.linear(V, W, bias), [0, 2, 1, 2]),
          V=V, W=W, bias=bias)
    z = _leaf(rng, 4)
    check("softmax_cross_entropy", lambda: T.softmax_cross_entropy(z, 3), z=z)

    o = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 3)), requires_grad=True)
    t = rng.random((2, 3, 3)) < 0.5
    check("weighted_bce", lambda: T.weighted_bce(o, t, 5.0), o=o)
    zl = _leaf(rng, 2, 3, 3)
    check("weighted_bce_with_logits", lambda: T.weighted_bce_with_logits(zl, t, 5.0), zl=zl)

    xc = _leaf(rng, 1, 4, 4, 4)
    wc, bc = _leaf(rng, 2, 1, 2, 2, 2), _leaf(rng, 2)
    proj = Tensor(rng.normal(size=(2, 3, 3, 3)))
    check("conv3d", lambda: T.tsum(T.mul(T.conv3d(xc, wc, bc), proj)), x=xc, weight=wc, bias=bc)
    xs = _leaf(rng, 2, 2, 4, 4, 4)
    ws, bs = _leaf(rng, 3, 2, 4, 4, 4), _leaf(rng, 3)
    proj_s = Tensor(rng.normal(size=(2, 3, 2, 2, 2)))
    check("conv3d_stride2", lambda: T.tsum(T.mul(T.conv3d(xs, ws, bs, 2, 1), proj_s)), x=xs, weight=ws, bias=bs)
    xt = _leaf(rng, 2, 2, 2, 2, 2)
    wt, bt = _leaf(rng, 2, 3, 4, 4, 4), _leaf(rng, 3)
    proj_t = Tensor(rng.normal(size=(2, 3, 4, 4, 4)))
    check("conv_transpose3d", lambda: T.tsum(T.mul(T.conv_transpose3d(xt, wt, bt, 2, 1), proj_t)),
          x=xt, weight=wt, bias=bt)

    xb = _leaf(rng, 2, 3)
    gamma, beta = _leaf(rng, 3), _leaf(rng, 3)
    proj_b = Tensor(rng.normal(size=(2, 3)))
    check("batch_norm_train", lambda: T.tsum(T.mul(T.batch_norm(xb, gamma, beta, training=True), proj_b)),
          x=xb, gamma=gamma, beta=beta)
    xb5 = _leaf(rng, 2, 3, 2, 2, 2)
    proj_b5 = Tensor(rng.normal(size=xb5.shape))
    check("batch_norm_train_spatial",
          lambda: T.tsum(T.mul(T.batch_norm(xb5, gamma, beta, training=True), proj_b5)),
          x=xb5, gamma=gamma, beta=beta)
    running = T.RunningStats(3, np.float64)
    running.mean[:] = rng.normal(size=3)
    running.var[:] = rng.uniform(0.5, 2.0, size=3)
    check("batch_norm_eval", lambda: T.tsum(T.mul(T.batch_norm(xb, gamma, beta, running, training=False), proj_b)),
          x=xb, gamma=gamma, beta=beta)
    return reports


def model_checks(seed: int = 0, grid_side: int = 8, leaf_side: int = 4,
                 tolerance: float = 1e-4, max_entries: int = 4) -> List[GradCheckReport]:
    """Layer-level and end-to-end checks of the network at 64-bit.

    Each parameter tensor has up to ``max_entries`` coordinates perturbed.
    """
    from . import tensor as T
    from .model import (ModelConfig, ParameterStore, Pass, classify_node, leaf_decode, leaf_encode,
                        node_decode, node_encode, tree_decode, tree_encode)
    from .octree import build
    from .training import total_loss
    from .voxel import random_grid

    rng = np.random.default_rng(seed)
    config = ModelConfig(grid_side=grid_side, leaf_side=leaf_side)
    ps = ParameterStore(config, seed=seed, dtype=np.float64)
    F, side = config.feature_channels, 4
    reports = []

    def check(name, fn, prefixes, extra=None):
        inputs = {n: ps[n] for n in ps.names() if n.startswith(prefixes)}
        inputs.update(extra or {})
        reports.append(grad_check(fn, inputs, tolerance=tolerance, max_entries=max_entries,
                                  rng=rng, name=name))

    def feature(batch):
        return Tensor(rng.normal(size=(batch, F, side, side, side)), requires_grad=True)

    def project(t):
        return Tensor(rng.normal(size=t.shape))

    blocks = rng.random((3, leaf_side, leaf_side, leaf_side)) < 0.5
    out = leaf_encode(ps, blocks, Pass(training=True))
    p = project(out)
    check("leaf_encode", lambda: T.tsum(T.mul(leaf_encode(ps, blocks, Pass(training=True)), p)), ("leaf_enc.",))

    children = [feature(2) for _ in range(8)]
    p = project(children[0])
    check("node_encode", lambda: T.tsum(T.mul(node_encode(ps, children, 1, Pass(training=True)), p)),
          ("node_enc.L1.",), {f"child{s}": c for s, c in enumerate(children[:2])})

    root = feature(2)
    p = Tensor(rng.normal(size=(2, config.latent_dim)))
    check("tree_encode", lambda: T.tsum(T.mul(tree_encode(ps, root), p)), ("tree_enc.",), {"feature": root})

    code = Tensor(rng.normal(size=(2, config.latent_dim)), requires_grad=True)
    p = project(root)
    check("tree_decode", lambda: T.tsum(T.mul(tree_decode(ps, code), p)), ("tree_dec.",), {"code": code})

    parent = feature(2)
    projs = [project(parent) for _ in range(8)]

    def node_decode_loss():
        outs = node_decode(ps, parent, 1, Pass(training=True))
        return T.add_n([T.tsum(T.mul(o, q)) for o, q in zip(outs, projs)])

    check("node_decode", node_decode_loss, ("node_dec.L1.",), {"parent": parent})

    leaf_feat = feature(2)
    p = Tensor(rng.normal(size=(2, leaf_side, leaf_side, leaf_side)))
    check("leaf_decode", lambda: T.tsum(T.mul(leaf_decode(ps, leaf_feat, Pass(training=True)), p)),
          ("leaf_dec.",), {"feature": leaf_feat})

    node_feat = feature(3)
    check("classify_node", lambda: T.softmax_cross_entropy(classify_node(ps, node_feat), [0, 3, 2]),
          ("classifier.",), {"feature": node_feat})

    grids = [random_grid(grid_side, 0.3, rng), random_grid(grid_side, 0.6, rng)]
    trees = [build(g, leaf_side) for g in grids]
    check("end_to_end_loss", lambda: total_loss(trees, ps, 5.0, Pass(training=True))[0],
          ("leaf_enc.", "const.", "node_enc.", "tree_enc.", "tree_dec.", "node_dec.", "leaf_dec.", "classifier."))
    return reports


def run_suite(seed: int = 0, grid_side: int = 8, leaf_side: int = 4,
              tolerance: float = 1e-4) -> List[GradCheckReport]:
    """All operation checks plus the network checks on an ``N/k`` model."""
    return op_checks(seed, tolerance) + model_checks(seed, grid_side, leaf_side, tolerance)
