"""Minimal reverse-mode automatic differentiation over float32 numpy arrays.

Only the operators needed by the transformer backbone and the PETL modules
are provided.  Every op builds a node holding its inputs and a backward
closure; :func:`backward` walks the graph in reverse topological order.

>>> x = Tensor([3.0], requires_grad=True)
>>> backward(sum_all(x * x))
>>> float(x.grad[0])
6.0
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import masking

DTYPE = np.float32
_SEQ = itertools.count()


class GraphError(RuntimeError):
    """Raised when a graph is reused after its backward pass."""


class Tensor:
    """A dense float32 array with an optional gradient buffer.

    ``requires_grad`` leaves accumulate into ``grad`` during :func:`backward`.
    Non-leaf tensors keep references to their parents until the graph is
    released.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_released", "_seq")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = _op
        self._released = False
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar, kept to the supported op set
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return elementwise_mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*inputs: Tensor) -> bool:
    return any(t.requires_grad for t in inputs)


def _node(data: np.ndarray, inputs: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor(data, _op=op)
    if _needs_grad(*inputs):
        out.requires_grad = True
        out._parents = inputs
        out._backward = backward_fn
    return out


class NonFiniteError(ValueError):
    """An op received NaN or Inf."""


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(f"{op}: non-finite input")


def _shape_error(op: str, a, b) -> ValueError:
    return ValueError(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (trailing-dim broadcasting only)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    g = grad.sum(axis=tuple(range(lead))) if lead > 0 else grad
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_trailing_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    # rhs may broadcast against the trailing dims of lhs, nothing more
    if a.shape == b.shape:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    tail = big.shape[big.ndim - small.ndim:]
    for x, y in zip(tail, small.shape):
        if x != y and y != 1 and x != 1:
            raise _shape_error(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    ``b`` may be 2-D (shared weight) or carry the same leading dims as ``a``.
    """
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise _shape_error("matmul", A.shape, B.shape)
    if B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise _shape_error("matmul", A.shape, B.shape)
    _check_finite("matmul", A, B)
    out = np.matmul(A, B)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(B, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if B.ndim == 2:
                gb = np.matmul(A.reshape(-1, A.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            else:
                gb = np.matmul(np.swapaxes(A, -1, -2), g)
        return ga, gb

    return _node(out, (a, b), "matmul", bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing_broadcast("add", a.data, b.data)
    _check_finite("add", a.data, b.data)
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _node(out, (a, b), "add", bw)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing_broadcast("elementwise_mul", a.data, b.data)
    _check_finite("elementwise_mul", a.data, b.data)
    A, B = a.data, b.data
    out = A * B

    def bw(g):
        return (_unbroadcast(g * B, A.shape) if a.requires_grad else None,
                _unbroadcast(g * A, B.shape) if b.requires_grad else None)

    return _node(out, (a, b), "elementwise_mul", bw)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c32 = DTYPE(c)
    out = a.data * c32
    return _node(out, (a,), "scale", lambda g: (g * c32,))


def relu(a: Tensor) -> Tensor:
    _check_finite("relu", a.data)
    pos = a.data > 0
    out = np.where(pos, a.data, DTYPE(0))
    return _node(out, (a,), "relu", lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    _check_finite("gelu", a.data)
    x = a.data
    x2 = x * x
    t = np.tanh(DTYPE(_GELU_C) * x * (DTYPE(1.0) + DTYPE(0.044715) * x2))
    out = DTYPE(0.5) * x * (DTYPE(1.0) + t)

    def bw(g):
        dinner = DTYPE(_GELU_C) * (DTYPE(1.0) + DTYPE(3 * 0.044715) * x2)
        d = DTYPE(0.5) * (DTYPE(1.0) + t) + DTYPE(0.5) * x * (DTYPE(1.0) - t * t) * dinner
        return (g * d,)

    return _node(out, (a,), "gelu", bw)


def softmax_lastdim(a: Tensor) -> Tensor:
    _check_finite("softmax_lastdim", a.data)
    x = a.data.astype(np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    out = p.astype(DTYPE)

    def bw(g):
        g64 = g.astype(np.float64)
        return ((p * (g64 - (g64 * p).sum(axis=-1, keepdims=True))).astype(DTYPE),)

    return _node(out, (a,), "softmax_lastdim", bw)


LN_EPS = 1e-5


def layer_norm(a: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis; no affine part (compose with mul/add)."""
    _check_finite("layer_norm", a.data)
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        g64 = g.astype(np.float64)
        gx = inv / n * (n * g64 - g64.sum(axis=-1, keepdims=True)
                        - xhat * (g64 * xhat).sum(axis=-1, keepdims=True))
        return (gx.astype(DTYPE),)

    return _node(xhat.astype(DTYPE), (a,), "layer_norm", bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]
    V = table.shape

    def bw(g):
        gt = np.zeros(V, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, V[-1]))
        return (gt,)

    return _node(out, (table,), "embedding_lookup", bw)


def concat_rows(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (default: the row axis of the trailing matrices)."""
    arrays = [p.data for p in parts]
    ref = arrays[0]
    ax = axis % ref.ndim
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or any(arr.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise _shape_error("concat_rows", ref.shape, arr.shape)
    out = np.concatenate(arrays, axis=ax)
    bounds = np.cumsum([a.shape[ax] for a in arrays])[:-1]

    def bw(g):
        pieces = np.split(g, bounds, axis=ax)
        return tuple(pc if p.requires_grad else None for pc, p in zip(pieces, parts))

    return _node(out, tuple(parts), "concat_rows", bw)


def mean_pool(a: Tensor, axis: int = -2) -> Tensor:
    """Mean over ``axis`` (default: the sequence axis of B x S x d)."""
    ax = axis % a.data.ndim
    n = a.shape[ax]
    out = a.data.mean(axis=ax, dtype=np.float64).astype(DTYPE)
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / DTYPE(n), shape).astype(DTYPE),)

    return _node(out, (a,), "mean_pool", bw)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=DTYPE)
    shape = a.shape
    return _node(out, (a,), "sum_all", lambda g: (np.full(shape, g, dtype=DTYPE),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _shape_error("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("cross_entropy: label out of range")
    _check_finite("cross_entropy", logits.data)
    x = logits.data.astype(np.float64)
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    rows = np.arange(len(labels))
    loss = (lse - x[rows, labels]).mean()
    B = len(labels)

    def bw(g):
        p = np.exp(x - lse[:, None])
        p[rows, labels] -= 1.0
        return ((p * (float(g) / B)).astype(DTYPE),)

    return _node(np.asarray(loss, dtype=DTYPE), (logits,), "cross_entropy", bw)


# shape plumbing for multi-head attention

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return _node(out, (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _node(out, (a,), "transpose", lambda g: (g.transpose(inv),))


def split_cols(a: Tensor, n: int) -> list[Tensor]:
    """Split the last axis into ``n`` equal parts."""
    width = a.shape[-1]
    if width % n:
        raise ValueError(f"split_cols: {width} not divisible by {n}")
    w = width // n
    outs = []
    for i in range(n):
        sl = slice(i * w, (i + 1) * w)

        def bw(g, sl=sl):
            full = np.zeros(a.shape, dtype=DTYPE)
            full[..., sl] = g
            return (full,)

        outs.append(_node(np.ascontiguousarray(a.data[..., sl]), (a,), "split_cols", bw))
    return outs


FORWARD_OPS = {
    "matmul": matmul,
    "add": add,
    "elementwise_mul": elementwise_mul,
    "relu": relu,
    "gelu": gelu,
    "softmax_lastdim": softmax_lastdim,
    "layer_norm": layer_norm,
    "embedding_lookup": embedding_lookup,
    "concat_rows": concat_rows,
    "mean_pool": mean_pool,
    "cross_entropy": cross_entropy,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a forward op by name."""
    try:
        fn = FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# straight-through top-k binarization
# ---------------------------------------------------------------------------

def binarize_topk_ste(scores: Tensor, k: float) -> Tensor:
    """Top-k|s| binary mask; the backward pass is the identity."""
    if not 0 < k <= 1:
        raise ValueError(f"sparsity k must lie in (0, 1], got {k}")
    m = masking.topk_bits(scores.data, k).astype(DTYPE)
    return _node(m, (scores,), "binarize_topk_ste", lambda g: (g,))


def combine_ste(a: Tensor, b: Tensor, mode: str = "OR") -> Tensor:
    """Combine two binary mask tensors; gradient passes to both unchanged."""
    if a.shape != b.shape:
        raise _shape_error("combine", a.shape, b.shape)
    out = masking.combine_bits(a.data.astype(bool), b.data.astype(bool), mode).astype(DTYPE)
    return _node(out, (a, b), f"combine_{mode}", lambda g: (g, g))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    """Reachable requires_grad nodes in creation order.

    A node is always created after its inputs, so creation order is a
    topological order.  Using it (rather than DFS order) fixes the order in
    which a shared leaf sums its contributions to the order of the forward
    pass, independent of how the graph branches.
    """
    nodes, seen, stack = [], {id(root)}, [root]
    while stack:
        node = stack.pop()
        nodes.append(node)
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate (a tensor used at several sites receives the
    sum).  The graph is released afterwards; a second call raises
    :class:`GraphError`.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._released:
        raise GraphError("backward called twice on the same graph")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any requires_grad tensor")
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.astype(DTYPE) if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            grads[pid] = pg if pid not in grads else grads[pid] + pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._released = True


def parameters_grad(params: Iterable[Tensor]) -> list[np.ndarray | None]:
    return [p.grad for p in params]


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def numerical_grad(f: Callable[[np.ndarray], float], point: np.ndarray, epsilon: float = 1e-3,
                   coords: Iterable[int] | None = None, dtype=np.float64) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``point``.

    The step actually taken is measured after rounding to ``dtype``.  Only
    ``coords`` (flat indices) are evaluated when given; others stay NaN.
    """
    x = np.array(point, dtype=dtype, copy=True)
    flat = x.reshape(-1)
    g = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        hi = dtype(orig + epsilon)
        lo = dtype(orig - epsilon)
        flat[i] = hi
        fp = float(f(x))
        flat[i] = lo
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (float(hi) - float(lo))
    return g.reshape(x.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = ~np.isnan(n)
    if not keep.any():
        return 0.0
    return float(np.max(np.abs(a[keep] - n[keep]) / (np.abs(a[keep]) + 1e-8)))


@contextlib.contextmanager
def working_precision(dtype):
    """Temporarily evaluate every op in ``dtype`` (not thread-safe)."""
    global DTYPE
    saved, DTYPE = DTYPE, dtype
    try:
        yield
    finally:
        DTYPE = saved


def finite_difference_check(f: Callable[[Tensor], Tensor], point, epsilon: float = 1e-3,
                            coords: Iterable[int] | None = None) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor.  The error per coordinate is
    ``|analytic - numeric| / (|analytic| + 1e-8)``.  The analytic gradient
    is computed in float32; the difference quotient is evaluated in float64
    at the same (float32-representable) point, since a float32 loss carries
    only ~7 digits and a 1e-3 step would leave about four of them.
    """
    x = Tensor(np.asarray(point, dtype=DTYPE), requires_grad=True)
    backward(f(x))
    with working_precision(np.float64):
        numeric = numerical_grad(lambda arr: float(f(Tensor(arr)).data), x.data.astype(np.float64),
                                 epsilon, coords, dtype=np.float64)
    return max_relative_error(x.grad, numeric)
