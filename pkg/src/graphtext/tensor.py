"""Dense float64 tensors with reverse-mode gradient accumulation.

Everything the model's forward and backward passes need, and nothing more:
dense matmul (2-D and batched 3-D), masked row softmax, layer norm, a smooth
pointwise nonlinearity, last-axis concatenation, mean/max/std reductions, and
row gather/scatter for embedding tables and per-node updates.

No GPU, no mixed precision, no broadcasting beyond what these ops need.
Gradient state lives on the tensors themselves; a single backward() walk over
one computation graph is single-threaded, but distinct graphs share nothing
mutable and may run in parallel threads (the grad-mode flag is thread-local).
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "GraphConsumedError",
    "no_grad",
    "backward",
    "matmul",
    "masked_softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "gelu",
    "tanh",
    "sqrt",
    "concat_last",
    "gather_rows",
    "add_rows",
    "reduce_sum",
    "mean",
    "reduce_max",
    "reduce_std",
    "linear",
]


class ShapeError(ValueError):
    """Operand shapes do not line up for the requested operation."""


class GraphConsumedError(RuntimeError):
    """backward() was called twice on the same computation graph."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager: ops run without recording the backward graph."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A row-major float64 array plus its slot in the reverse-mode tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled()
        self._parents = ()
        self._backward_fn = None
        self._consumed = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data
        return _node(out_data, (self, other), _add_backward(self, other, out_data.shape))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __neg__(self):
        def bwd(g, parents):
            _accum(parents[0], -g)

        return _node(-self.data, (self,), bwd)

    def __mul__(self, other):
        other = _as_tensor(other)
        out_data = self.data * other.data

        def bwd(g, parents):
            a, b = parents
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))

        return _node(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not provided; multiply by a reciprocal")
        return self * (1.0 / float(scalar))

    def __pow__(self, p):
        p = float(p)

        def bwd(g, parents):
            (a,) = parents
            _accum(a, g * p * a.data ** (p - 1.0))

        return _node(self.data**p, (self,), bwd)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape

        def bwd(g, parents):
            _accum(parents[0], g.reshape(src_shape))

        return _node(self.data.reshape(shape), (self,), bwd)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)

        def bwd(g, parents):
            _accum(parents[0], g.transpose(inv))

        return _node(self.data.transpose(axes), (self,), bwd)

    # -- reductions -----------------------------------------------------------

    def sum(self):
        src_shape = self.data.shape

        def bwd(g, parents):
            _accum(parents[0], np.broadcast_to(g, src_shape).copy())

        return _node(np.array(self.data.sum()), (self,), bwd)


class Parameter(Tensor):
    """A named trainable tensor; its gradient buffer always matches its shape."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


# -- tape plumbing -------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _add_backward(a, b, out_shape):
    def bwd(g, parents):
        pa, pb = parents
        if pa.requires_grad:
            _accum(pa, _unbroadcast(g, pa.data.shape))
        if pb.requires_grad:
            _accum(pb, _unbroadcast(g, pb.data.shape))

    return bwd


def backward(loss: Tensor):
    """Populate gradients of every reachable tensor from a scalar loss.

    Each tensor's gradient afterwards equals d(loss)/d(tensor); Parameters
    accumulate into their persistent buffers. The graph is torn down as it is
    walked, so a second call on the same loss raises GraphConsumedError.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise GraphConsumedError("this computation graph has already been consumed by backward()")
    loss._consumed = True

    # Iterative topological order; model graphs are deeper than the default
    # recursion limit.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad, node._parents)
        # release the tape as we go
        node._parents = ()
        node._backward_fn = None


# -- core operations ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched product of equal-rank 3-D ones."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeError(f"matmul needs two 2-D or two 3-D tensors, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2] or (a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]):
        raise ShapeError(f"matmul dimension mismatch: {a.data.shape} x {b.data.shape}")

    def bwd(g, parents):
        pa, pb = parents
        if pa.requires_grad:
            _accum(pa, g @ pb.data.swapaxes(-1, -2))
        if pb.requires_grad:
            _accum(pb, pa.data.swapaxes(-1, -2) @ g)

    return _node(a.data @ b.data, (a, b), bwd)


def masked_softmax_rows(scores: Tensor, mask) -> Tensor:
    """Softmax over the permitted entries of each row of a rows-x-cols tensor.

    `mask` is a boolean array of the same shape; True marks a permitted entry.
    Permitted entries of a row sum to 1; masked entries are exactly 0; a row
    with no permitted entry comes back all zeros rather than erroring, which
    is the documented behaviour for queries that may attend to nothing.
    """
    scores = _as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.data.shape:
        raise ShapeError(f"scores shape {scores.data.shape} != mask shape {mask.shape}")

    neg = np.where(mask, scores.data, -np.inf)
    rowmax = neg.max(axis=-1, keepdims=True)
    # fully-masked rows: rowmax is -inf; force exp argument to -inf -> 0
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.where(mask, np.exp(neg - rowmax), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0.0, denom, 1.0)
    y = e / safe

    def bwd(g, parents):
        (s,) = parents
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(s, y * (g - dot))

    return _node(y, (scores,), bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    """Row-wise log softmax over the last axis, numerically stable."""
    x = _as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bwd(g, parents):
        (p,) = parents
        _accum(p, g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    return _node(y, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g, parents):
        px, pg, pb = parents
        if pg.requires_grad:
            _accum(pg, (g * xhat).reshape(-1, d).sum(axis=0))
        if pb.requires_grad:
            _accum(pb, g.reshape(-1, d).sum(axis=0))
        if px.requires_grad:
            gh = g * pg.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            _accum(px, inv * (gh - m1 - xhat * m2))

    return _node(xhat * gain.data + bias.data, (x, gain, bias), bwd)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def bwd(g, parents):
        _accum(parents[0], g * (1.0 - y * y))

    return _node(y, (x,), bwd)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Smooth pointwise nonlinearity (tanh form), kind to finite-difference checks."""
    x = _as_tensor(x)
    v = x.data
    v2 = v * v
    th = np.tanh(_GELU_C * (v + 0.044715 * (v2 * v)))
    y = 0.5 * v * (1.0 + th)

    def bwd(g, parents):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        _accum(parents[0], g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du))

    return _node(y, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.sqrt(x.data)

    def bwd(g, parents):
        _accum(parents[0], g * 0.5 / y)

    return _node(y, (x,), bwd)


def concat_last(tensors) -> Tensor:
    """Concatenate along the last axis."""
    tensors = [_as_tensor(t) for t in tensors]
    widths = [t.data.shape[-1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def bwd(g, parents):
        for p, piece in zip(parents, np.split(g, splits, axis=-1)):
            _accum(p, piece)

    return _node(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), bwd)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Index the first axis with an integer array; repeats are fine.

    Used both for embedding-table lookups and for pulling node-token rows out
    of a sequence. Backward scatter-adds, so repeated indices accumulate.
    """
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g, parents):
        (p,) = parents
        gx = np.zeros_like(p.data)
        np.add.at(gx, idx, g)
        _accum(p, gx)

    return _node(x.data[idx], (x,), bwd)


def add_rows(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Return base with `rows` added at first-axis positions `idx`."""
    base, rows = _as_tensor(base), _as_tensor(rows)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = base.data.copy()
    np.add.at(out_data, idx, rows.data)

    def bwd(g, parents):
        pb, pr = parents
        if pb.requires_grad:
            _accum(pb, g)
        if pr.requires_grad:
            _accum(pr, g[idx])

    return _node(out_data, (base, rows), bwd)


def reduce_sum(x: Tensor, axis: int) -> Tensor:
    """Sum along one axis."""
    x = _as_tensor(x)

    def bwd(g, parents):
        (p,) = parents
        _accum(p, np.broadcast_to(np.expand_dims(g, axis), p.data.shape).copy())

    return _node(x.data.sum(axis=axis), (x,), bwd)


def mean(x: Tensor, axis: int) -> Tensor:
    """Arithmetic mean along one axis (population denominator)."""
    x = _as_tensor(x)
    n = x.data.shape[axis]

    def bwd(g, parents):
        (p,) = parents
        _accum(p, np.broadcast_to(np.expand_dims(g, axis), p.data.shape) / n)

    return _node(x.data.mean(axis=axis), (x,), bwd)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max along one axis; gradient routes to the first attaining position."""
    x = _as_tensor(x)
    arg = np.argmax(x.data, axis=axis)

    def bwd(g, parents):
        (p,) = parents
        gx = np.zeros_like(p.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accum(p, gx)

    return _node(np.max(x.data, axis=axis), (x,), bwd)


_STD_EPS = 1e-9
_STD_SHIFT = np.sqrt(_STD_EPS)


def reduce_std(x: Tensor, axis: int) -> Tensor:
    """Population standard deviation along one axis.

    Computed as sqrt(var + eps) - sqrt(eps): the eps keeps the gradient finite
    at zero variance, while the shift keeps a singleton (or constant) set at
    exactly 0.
    """
    m = mean(x, axis)
    msq = mean(x * x, axis)
    var = msq - m * m
    return sqrt(var + _STD_EPS) - Tensor(np.full(var.shape, _STD_SHIFT))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b). For 3-D x, applies to the last axis via a flat view."""
    if x.data.ndim == 3:
        lead = x.data.shape[:2]
        y = matmul(x.reshape(lead[0] * lead[1], x.data.shape[2]), w)
        y = y.reshape(lead[0], lead[1], w.data.shape[1])
    else:
        y = matmul(x, w)
    if b is not None:
        y = y + b
    return y
