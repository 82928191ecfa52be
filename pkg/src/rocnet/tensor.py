"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the recursive octree network needs are provided. Every
differentiable op records its parents and a backward closure on the output
tensor; :meth:`Tensor.backward` replays those closures in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import struct
import weakref
from typing import BinaryIO, Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class UsageError(RuntimeError):
    pass


_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class _MemoryTracker:
    def __init__(self):
        self.live = 0
        self.peak = 0
        self.allocations = 0

    def add(self, nbytes: int) -> None:
        self.live += nbytes
        self.allocations += 1
        if self.live > self.peak:
            self.peak = self.live

    def release(self, nbytes: int) -> None:
        self.live -= nbytes


_tracker: Optional[_MemoryTracker] = None


@contextlib.contextmanager
def track_memory():
    """Count bytes held by tensors created inside the block.

    Yields the tracker; ``tracker.peak`` is the maximum number of tensor bytes
    simultaneously alive. Tensors created before entering are not counted.
    """
    global _tracker
    previous = _tracker
    tracker = _MemoryTracker()
    _tracker = tracker
    try:
        yield tracker
    finally:
        _tracker = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPE_TAGS:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name
        if _tracker is not None:
            nbytes = arr.nbytes
            _tracker.add(nbytes)
            weakref.finalize(self, _tracker.release, nbytes)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every leaf tensor reachable from this one.

        Leaf gradients accumulate across calls; call :meth:`zero_grad` to reset.
        Intermediate gradients are transient.
        """
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic sugar used by losses and tests
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _topological_order(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"add_n: shapes {shape} and {t.shape} differ")
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data
    return _result(total, tensors, lambda g: (g,) * len(tensors), "add_n")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),), "scale")


def tsum(a: Tensor) -> Tensor:
    return _result(
        np.asarray(a.data.sum(), dtype=a.dtype), (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum",
    )


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the leading axis."""
    tensors = tuple(tensors)
    sizes = [t.shape[0] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=0)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _result(data, tensors, backward, "concat")


def gather_rows(sources: Sequence[Tensor], refs: Sequence[tuple]) -> Tensor:
    """Stack rows ``sources[s][r]`` for each ``(s, r)`` in ``refs`` along axis 0."""
    # snapshot: callers keep appending to their list, which would form a cycle
    sources = tuple(sources)
    refs = tuple(refs)
    data = np.stack([sources[s].data[r] for s, r in refs], axis=0)

    def backward(g):
        grads = [None] * len(sources)
        for i, (s, r) in enumerate(refs):
            if not sources[s].requires_grad:
                continue
            if grads[s] is None:
                grads[s] = np.zeros_like(sources[s].data)
            grads[s][r] += g[i]
        return tuple(grads)

    return _result(data, sources, backward, "gather_rows")


def take_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), backward, "take_rows")


def elu(x: Tensor) -> Tensor:
    d = x.data
    neg = np.minimum(d, 0)
    em1 = np.expm1(neg)
    out = np.maximum(d, 0) + em1

    def backward(g):
        return (g * np.where(d > 0, 1.0, em1 + 1.0).astype(d.dtype),)

    return _result(out, (x,), backward, "elu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward, "sigmoid")


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "elu":
        return elu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# dense layers

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` for ``x`` of shape ``[d_in]`` or ``[B, d_in]``."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, w = x.data, weight.data
    out = xd @ w.T + bias.data

    def backward(g):
        gx = g @ w
        if xd.ndim == 1:
            gw = np.outer(g, xd)
            gb = g
        else:
            gw = g.T @ xd
            gb = g.sum(axis=0)
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward, "linear")


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Summed ``-log softmax(logits)[target]``.

    ``logits`` is ``[n]`` with an integer target or ``[B, n]`` with ``B`` targets.
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    t = np.atleast_1d(np.asarray(target, dtype=np.intp))
    if t.shape[0] != z2.shape[0] or np.any(t < 0) or np.any(t >= z2.shape[1]):
        raise DimensionError(f"softmax_cross_entropy: targets {t} for logits {z.shape}")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(t.shape[0])
    loss = -logp[rows, t].sum()

    def backward(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        p *= g
        return (p[0] if single else p,)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), backward, "softmax_cross_entropy")


def weighted_bce(output: Tensor, target: np.ndarray, alpha: float) -> Tensor:
    """Summed ``-alpha*t*log(o) - (1-t)*log(1-o)`` over all elements.

    Log terms are clamped at -100 so saturated probabilities stay finite.
    """
    if output.shape != target.shape:
        raise DimensionError(f"weighted_bce: output {output.shape} vs target {target.shape}")
    o = output.data
    t = target.astype(o.dtype)
    with np.errstate(divide="ignore"):
        log_o = np.maximum(np.log(o), -100.0)
        log_1mo = np.maximum(np.log1p(-o), -100.0)
    loss = -(alpha * t * log_o + (1.0 - t) * log_1mo).sum()
    tiny = np.finfo(o.dtype).tiny

    def backward(g):
        return (g * (-alpha * t / np.maximum(o, tiny) + (1.0 - t) / np.maximum(1.0 - o, tiny)),)

    return _result(np.asarray(loss, dtype=o.dtype), (output,), backward, "weighted_bce")


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z).astype(z.dtype)


def weighted_bce_with_logits(logits: Tensor, target: np.ndarray, alpha: float) -> Tensor:
    """:func:`weighted_bce` of ``sigmoid(logits)``, evaluated stably."""
    if logits.shape != target.shape:
        raise DimensionError(f"weighted_bce: logits {logits.shape} vs target {target.shape}")
    z = logits.data
    t = target.astype(z.dtype)
    loss = (alpha * t * _softplus(-z) + (1.0 - t) * _softplus(z)).sum()

    def backward(g):
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        e = np.exp(z[~pos])
        p[~pos] = e / (1.0 + e)
        return (g * (-alpha * t * (1.0 - p) + (1.0 - t) * p),)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), backward, "weighted_bce")


# ---------------------------------------------------------------------------
# convolution

def _batched(x: Tensor) -> bool:
    if x.data.ndim == 5:
        return True
    if x.data.ndim == 4:
        return False
    raise DimensionError(f"expected [C,D,H,W] or [B,C,D,H,W], got {x.shape}")


def _conv_out_side(side: int, k: int, stride: int, padding: int) -> int:
    return (side + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    p = ((0, 0), (0, 0)) + ((padding, padding),) * 3
    return np.pad(x, p)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Cross-correlation of ``x[B,Ci,D,H,W]`` with ``w[Co,Ci,k,k,k]``."""
    k = w.shape[2]
    if k == 1 and stride == 1 and padding == 0:
        B, ci = x.shape[:2]
        y = np.matmul(w[:, :, 0, 0, 0], x.reshape(B, ci, -1))
        return y.reshape((B, w.shape[0]) + x.shape[2:])
    xp = _pad(x, padding)
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    y = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(y.transpose(0, 4, 1, 2, 3))


def _conv_input_grad(gy: np.ndarray, w: np.ndarray, in_spatial: tuple, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`_conv_forward` with respect to its input."""
    k = w.shape[2]
    B = gy.shape[0]
    ci = w.shape[1]
    if k == 1 and stride == 1 and padding == 0:
        gx = np.matmul(w[:, :, 0, 0, 0].T, gy.reshape(B, gy.shape[1], -1))
        return gx.reshape((B, ci) + gy.shape[2:])
    do, ho, wo = gy.shape[2:]
    cols = np.tensordot(gy, w, axes=([1], [0]))  # [B, do, ho, wo, Ci, k, k, k]
    cols = cols.transpose(0, 4, 1, 2, 3, 5, 6, 7)
    padded = tuple(s + 2 * padding for s in in_spatial)
    gx = np.zeros((B, ci) + padded, dtype=gy.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                gx[:, :,
                   i:i + stride * (do - 1) + 1:stride,
                   j:j + stride * (ho - 1) + 1:stride,
                   l:l + stride * (wo - 1) + 1:stride] += cols[..., i, j, l]
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gx)


def _conv_weight_grad(x: np.ndarray, gy: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if k == 1 and stride == 1 and padding == 0:
        B = x.shape[0]
        gw = np.matmul(gy.reshape(B, gy.shape[1], -1), x.reshape(B, x.shape[1], -1).transpose(0, 2, 1)).sum(axis=0)
        return gw[:, :, None, None, None]
    xp = _pad(x, padding)
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    gw = np.tensordot(gy, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # [Co, Ci, k, k, k]
    return gw


def _check_conv(x: np.ndarray, weight: Tensor, bias: Tensor, stride: int, padding: int, channels_axis: int):
    w = weight.data
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise DimensionError(f"weight must be [*, *, k, k, k], got {w.shape}")
    if x.shape[1] != w.shape[channels_axis]:
        raise DimensionError(f"input channels {x.shape[1]} do not match weight {w.shape}")
    out_channels = w.shape[1 - channels_axis]
    if bias.shape != (out_channels,):
        raise DimensionError(f"bias shape {bias.shape}, expected ({out_channels},)")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride {stride} / padding {padding}")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    batched = _batched(x)
    xd = x.data if batched else x.data[None]
    _check_conv(xd, weight, bias, stride, padding, channels_axis=1)
    k = weight.shape[2]
    spatial = xd.shape[2:]
    if any(s + 2 * padding < k for s in spatial):
        raise DimensionError(f"conv3d: input {spatial} with padding {padding} smaller than kernel {k}")
    y = _conv_forward(xd, weight.data, stride, padding)
    y += bias.data[None, :, None, None, None]

    def backward(g):
        g5 = g if batched else g[None]
        gx = gw = gb = None
        if x.requires_grad:
            gx = _conv_input_grad(g5, weight.data, spatial, stride, padding)
            if not batched:
                gx = gx[0]
        if weight.requires_grad:
            gw = _conv_weight_grad(xd, g5, k, stride, padding)
        if bias.requires_grad:
            gb = g5.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    return _result(y if batched else y[0], (x, weight, bias), backward, "conv3d")


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is ``[C_in, C_out, k, k, k]``.

    With zero bias this is exactly the adjoint of :func:`conv3d` using the same
    weight array.
    """
    batched = _batched(x)
    xd = x.data if batched else x.data[None]
    _check_conv(xd, weight, bias, stride, padding, channels_axis=0)
    k = weight.shape[2]
    out_spatial = tuple((s - 1) * stride - 2 * padding + k for s in xd.shape[2:])
    if any(s < 1 for s in out_spatial):
        raise DimensionError(f"conv_transpose3d: empty output for input {xd.shape}")
    y = _conv_input_grad(xd, weight.data, out_spatial, stride, padding)
    y += bias.data[None, :, None, None, None]

    def backward(g):
        g5 = g if batched else g[None]
        gx = gw = gb = None
        if x.requires_grad:
            gx = _conv_forward(g5, weight.data, stride, padding)
            if not batched:
                gx = gx[0]
        if weight.requires_grad:
            gw = _conv_weight_grad(g5, xd, k, stride, padding)
        if bias.requires_grad:
            gb = g5.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    return _result(y if batched else y[0], (x, weight, bias), backward, "conv_transpose3d")


# ---------------------------------------------------------------------------
# normalization

class RunningStats:
    """Per-channel running mean/variance buffers for batch normalization."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: Optional[RunningStats] = None,
    training: bool = True,
    eps: float = 1e-5,
    momentum: float = 0.1,
    stats: Optional[tuple] = None,
    record: Optional[list] = None,
) -> Tensor:
    """Normalize ``x[B, C, ...]`` per channel (axis 1).

    In training mode the batch statistics are used (biased variance) and
    ``running`` is updated with the unbiased variance. In eval mode the running
    statistics are used. ``stats=(mean, var)`` forces fixed statistics, which
    are then treated as constants. If ``record`` is given, the statistics
    actually used are appended to it.
    """
    xd = x.data
    if xd.ndim < 2 or gamma.shape != (xd.shape[1],) or beta.shape != (xd.shape[1],):
        raise DimensionError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    C = xd.shape[1]
    x3 = xd.reshape(xd.shape[0], C, -1)
    count = x3.shape[0] * x3.shape[2]

    def chansum(a):
        return a.sum(axis=0).sum(axis=-1)

    if stats is not None:
        mean, var = (np.asarray(s, dtype=xd.dtype) for s in stats)
        batch_stats = False
    elif training:
        mean = chansum(x3) / count
        centered = x3 - mean[:, None]
        var = chansum(centered * centered) / count
        batch_stats = True
        if running is not None:
            unbiased = var * (count / max(count - 1, 1))
            running.mean[...] = (1 - momentum) * running.mean + momentum * mean
            running.var[...] = (1 - momentum) * running.var + momentum * unbiased
    else:
        if running is None:
            raise UsageError("batch_norm in eval mode needs running statistics")
        mean, var = running.mean.astype(xd.dtype), running.var.astype(xd.dtype)
        batch_stats = False
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (x3 - mean[:, None]) * inv_std[:, None]
    out = xhat * gamma.data[:, None] + beta.data[:, None]

    def backward(g):
        g3 = g.reshape(x3.shape)
        gg = chansum(g3 * xhat)
        gb = chansum(g3)
        gxhat = g3 * gamma.data[:, None]
        if batch_stats:
            gx = (inv_std[:, None] / count) * (
                count * gxhat - chansum(gxhat)[:, None] - xhat * chansum(gxhat * xhat)[:, None]
            )
        else:
            gx = gxhat * inv_std[:, None]
        return gx.reshape(xd.shape), gg, gb

    if record is not None:
        record.append((mean.copy(), var.copy()))
    return _result(out.reshape(xd.shape).astype(xd.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# serialization

def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    """Little-endian: rank u32, extents u32, dtype tag u8, raw values."""
    array = np.asarray(array)
    tag = _DTYPE_TAGS.get(array.dtype)
    if tag is None:
        raise DimensionError(f"unsupported dtype {array.dtype}")
    stream.write(struct.pack("<I", array.ndim))
    stream.write(struct.pack(f"<{array.ndim}I", *array.shape))
    stream.write(struct.pack("<B", tag))
    stream.write(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def read_tensor(stream: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    (tag,) = struct.unpack("<B", _read_exact(stream, 1))
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    dtype = _TAG_DTYPES[tag].newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(stream, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype).astype(_TAG_DTYPES[tag]).reshape(shape)


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise ValueError("truncated tensor payload")
    return data
