"""Dense float tensors with reverse-mode automatic differentiation.

The working precision is float32. float64 tensors are also accepted so that
gradient-check tests can run a high-precision shadow of the same graph; an
operation never mixes the two.

Every operation eagerly computes its value and, when gradients are enabled
and some input requires them, records a Node capturing the inputs and a
backward closure. ``backward(loss)`` replays the recorded nodes in reverse
topological order, accumulating gradients into every participating tensor
that requires them. The tape is not consumed: after ``zero_grad`` a second
``backward`` reproduces the same gradients bitwise.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised when backward is invoked on an unsuitable tensor."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One recorded operation: captured inputs plus a backward closure."""

    __slots__ = ("name", "inputs", "out", "fn")

    def __init__(self, name, inputs, out, fn):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.fn = fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """Same data, no graph membership, no gradient requirement."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._node = None
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=np.float32):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _same_dtype(*ts):
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise TypeError(f"mixed dtypes {dt} and {t.data.dtype}")
    return dt


def _make(out_data, inputs, name, fn):
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._node = None
    out.requires_grad = False
    if _grad_enabled and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._node = Node(name, inputs, out, fn)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


class Graph:
    """Ordered record of the operations reachable from one output tensor.

    The node list is a topological order: every node's inputs were produced
    by earlier nodes (or are leaves). Reverse traversal drives backprop.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, t: Tensor) -> "Graph":
        order = []
        seen = set()
        if t._node is None:
            return cls(order)
        stack = [(t._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node.inputs:
                if inp._node is not None and id(inp._node) not in seen:
                    stack.append((inp._node, False))
        return cls(order)

    def run_backward(self):
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.fn(g)


def backward(loss: Tensor):
    """Accumulate d loss / d t into every reachable tensor requiring grad."""
    if loss.data.size != 1:
        raise GraphError(f"backward expects a scalar, got shape {tuple(loss.shape)}")
    graph = Graph.from_output(loss)
    loss.grad = np.ones_like(loss.data)
    graph.run_backward()


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")

    def fn(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), "add", fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)

    def fn(g):
        _accum(x, g * c)

    return _make(x.data * c, (x,), "scale", fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product. Shapes must match exactly unless `b` is a
    non-gradient constant broadcastable to `a` (mask semantics)."""
    _same_dtype(a, b)
    if a.shape != b.shape:
        if b.requires_grad or np.broadcast_shapes(a.shape, b.shape) != a.shape:
            raise DimensionError(f"mul: {a.shape} vs {b.shape}")

        def fn_c(g):
            _accum(a, g * b.data)

        return _make(a.data * b.data, (a, b), "mul", fn_c)

    def fn(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), "mul", fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias: b has the size of x's last axis."""
    _same_dtype(x, b)
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: {x.shape} + {b.shape}")

    def fn(g):
        _accum(x, g)
        _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(x.data + b.data, (x, b), "add_bias", fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2D x 2D, ND x 2D (stacked), or ND x ND with equal
    leading dims; the contracted dims must agree."""
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")

    out = a.data @ b.data

    def fn(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, (a, b), "matmul", fn)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def fn(g):
        _accum(x, np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose", fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def fn(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", fn)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    _same_dtype(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", fn)


def relu(x: Tensor) -> Tensor:
    def fn(g):
        _accum(x, g * (x.data > 0))

    return _make(np.maximum(x.data, 0), (x,), "relu", fn)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, 0.5 x (1 + erf(x / sqrt 2))."""
    dt = x.data.dtype
    cdf = (0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))).astype(dt)

    def fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) / dt.type(math.sqrt(2.0 * math.pi))
        _accum(x, g * (cdf + x.data * pdf))

    return _make(x.data * cdf, (x,), "gelu", fn)


def sum_all(x: Tensor) -> Tensor:
    def fn(g):
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _make(np.asarray(x.data.sum(dtype=x.data.dtype)), (x,), "sum", fn)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.dtype.type(x.data.size)

    def fn(g):
        _accum(x, np.broadcast_to(g / n, x.shape).copy())

    return _make(np.asarray(x.data.mean(dtype=x.data.dtype)), (x,), "mean", fn)


# ---------------------------------------------------------------------------
# normalization and attention kernels
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis=-1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), "softmax", fn)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to mask==True positions.

    Masked positions get exactly zero weight. A row with no allowed position
    yields an all-zero row (and zero gradient) rather than NaN.
    """
    allowed = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    neg = np.asarray(-np.inf, dtype=x.data.dtype)
    shifted = np.where(allowed, x.data, neg)
    m = shifted.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0).astype(x.data.dtype)
    e = np.exp(shifted - m)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s == 0, 1, s)

    def fn(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), "masked_softmax", fn)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing-axis row to zero mean / unit variance, then
    apply the elementwise affine (gain, bias)."""
    _same_dtype(x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    dt = x.data.dtype
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xn = xc * inv
    out = xn * gain.data + bias.data

    def fn(g):
        _accum(bias, g.reshape(-1, d).sum(axis=0))
        _accum(gain, (g * xn).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxn = g * gain.data
            term = dxn - dxn.mean(axis=-1, keepdims=True) - xn * (dxn * xn).mean(axis=-1, keepdims=True)
            _accum(x, inv * term)

    return _make(out, (x, gain, bias), "layernorm", fn)


# ---------------------------------------------------------------------------
# convolution, embedding lookup, cross entropy
# ---------------------------------------------------------------------------

def conv1d_out_len(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1D convolution over the time axis.

    x: [c_in, n] or [batch, c_in, n]; kernels: [c_out, c_in, k].
    Output length is floor((n + 2*padding - k) / stride) + 1.
    """
    _same_dtype(x, kernels)
    if kernels.ndim != 3:
        raise DimensionError(f"conv1d: kernels must be rank 3, got {kernels.shape}")
    k = kernels.shape[2]
    if k < 1 or stride < 1 or padding < 0:
        raise DimensionError(f"conv1d: invalid k={k}, stride={stride}, padding={padding}")
    squeeze = x.ndim == 2
    xs = x.shape if not squeeze else (1,) + x.shape
    if x.ndim not in (2, 3) or xs[1] != kernels.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} vs kernels {kernels.shape}")
    bsz, c_in, n = xs
    if n + 2 * padding < k:
        raise DimensionError(
            f"conv1d: input length {n} with padding {padding} shorter than kernel {k}")
    n_out = conv1d_out_len(n, k, stride, padding)
    c_out = kernels.shape[0]
    dt = x.data.dtype

    xd = x.data.reshape(bsz, c_in, n)
    if padding:
        xp = np.zeros((bsz, c_in, n + 2 * padding), dtype=dt)
        xp[:, :, padding:padding + n] = xd
    else:
        xp = xd
    # im2col: patches[b, t, c*k + j] = xp[b, c, t*stride + j]
    patches = np.empty((bsz, n_out, c_in * k), dtype=dt)
    for j in range(k):
        stop = j + stride * (n_out - 1) + 1
        patches[:, :, j::k] = xp[:, :, j:stop:stride].transpose(0, 2, 1)
    kf = kernels.data.reshape(c_out, c_in * k)
    out_tm = patches @ kf.T
    out = np.ascontiguousarray(out_tm.transpose(0, 2, 1))

    def fn(g):
        g_tm = g.reshape(bsz, c_out, n_out).transpose(0, 2, 1)
        if kernels.requires_grad:
            dk = np.einsum("boc,bof->cf", g_tm, patches)
            _accum(kernels, dk.reshape(kernels.shape).astype(dt))
        if x.requires_grad:
            dp = g_tm @ kf
            dxp = np.zeros((bsz, c_in, n + 2 * padding), dtype=dt)
            for j in range(k):
                stop = j + stride * (n_out - 1) + 1
                dxp[:, :, j:stop:stride] += dp[:, :, j::k].transpose(0, 2, 1)
            dx = dxp[:, :, padding:padding + n] if padding else dxp
            _accum(x, dx.reshape(x.shape))

    return _make(out.reshape((c_out, n_out) if squeeze else (bsz, c_out, n_out)),
                 (x, kernels), "conv1d", fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]. Gradient scatters into
    exactly the referenced rows."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = ids[(ids < 0) | (ids >= v)][0]
        raise IndexError(f"embedding id {bad} out of range [0, {v})")

    def fn(g):
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            np.add.at(dt, ids.ravel(), g.reshape(-1, table.shape[1]))
            _accum(table, dt)

    return _make(table.data[ids], (table,), "embedding", fn)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Mean negative log-softmax probability of targets.

    logits: [T, V] with targets [T], or batched [B, T, V] with targets [B, T].
    Positions equal to ignore_index contribute nothing. Rank-2: mean over
    non-ignored positions. Rank-3: mean over items of per-item means, so a
    padded batch scores exactly like averaging per-item losses. A fully
    ignored input yields loss 0 with zero gradient.
    """
    targets = np.asarray(targets)
    if logits.ndim not in (2, 3) or targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[-1]
    valid = targets != ignore_index
    tv = targets[valid]
    if tv.size and (tv.min() < 0 or tv.max() >= v):
        bad = tv[(tv < 0) | (tv >= v)][0]
        raise IndexError(f"cross_entropy target {bad} out of range [0, {v})")
    dt = logits.data.dtype

    m = logits.data.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits.data - m).sum(axis=-1))
    picked = np.take_along_axis(logits.data, np.maximum(targets, 0)[..., None], axis=-1)[..., 0]
    nll = np.where(valid, lse - picked, 0)

    if logits.ndim == 2:
        n = int(valid.sum())
        w = (valid / max(n, 1)).astype(dt)
        loss = nll.sum(dtype=dt) / dt.type(max(n, 1)) if n else dt.type(0.0)
    else:
        counts = valid.sum(axis=-1)
        denom = np.maximum(counts, 1)
        per_item = nll.sum(axis=-1) / denom
        loss = dt.type(per_item.mean() if len(per_item) else 0.0)
        w = (valid / (denom[:, None] * len(counts))).astype(dt)

    def fn(g):
        if not logits.requires_grad:
            return
        p = np.exp(logits.data - m)
        p /= p.sum(axis=-1, keepdims=True)
        np.subtract.at(p, (*np.nonzero(valid), targets[valid]), 1.0)
        _accum(logits, p * (g * w)[..., None])

    return _make(np.asarray(loss, dtype=dt), (logits,), "cross_entropy", fn)
