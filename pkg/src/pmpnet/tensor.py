"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation below records a closure on its output that maps the
upstream gradient to gradients for each input.  ``backward`` walks the
recorded graph once in reverse topological order and then releases it, so
each forward pass builds a fresh graph.

Broadcasting follows numpy rules; gradients are summed back over the
broadcast axes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit
import scipy.sparse as sp

from .errors import ContractError, DimensionError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_grad_enabled = True


class no_grad:
    """Context manager that stops graph recording (inference only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A numpy array plus an optional gradient slot and graph links."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn,
              name: str = "custom") -> Tensor:
    """Create a graph node from a forward value and a gradient rule.

    ``backward_fn`` receives the upstream gradient (same shape as ``data``)
    and must return one gradient array (or None) per parent.
    """
    out = Tensor(data)
    out.op = name
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands; bare scalars take the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return custom_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return custom_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(a.data * b.data, (a, b), bw, "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return custom_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x) -> Tensor:
    x = as_tensor(x)
    return custom_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise DimensionError(
                f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return custom_op(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def elementwise(op: str, a, b) -> Tensor:
    """Dispatch one of the named binary elementwise operations."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "concat":
        return concat([a, b], axis=-1)
    if op == "scale":
        return scale(a, float(b))
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a, b) -> Tensor:
    """``a[..., K] @ b[K, N]``; leading axes of ``a`` act as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = (g.reshape(-1, b.shape[1]) @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    out = (a.data.reshape(-1, b.shape[0]) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    return custom_op(out, (a, b), bw, "matmul")


def linear(x, w, b=None, relu: bool = False) -> Tensor:
    """Affine map ``x @ w + b`` (optionally followed by relu) as a single node."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {w.shape}")
    lead = x.shape[:-1]
    # 2-D products: numpy loops small BLAS calls over extra leading axes
    out = (x.data.reshape(-1, w.shape[0]) @ w.data).reshape(lead + (w.shape[1],))
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out += b.data
        parents = (x, w, b)
    mask = None
    if relu:
        mask = out > 0
        np.maximum(out, 0, out=out)

    def bw(g):
        if mask is not None:
            g = g * mask
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x.data.reshape(-1, w.shape[0]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        # ones @ g runs through BLAS; a plain axis-0 sum is several times slower here
        return gx, gw, np.ones(g2.shape[0], dtype=g2.dtype) @ g2

    return custom_op(out, parents, bw, "linear_relu" if relu else "linear")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {orig} as {shape}") from None
    return custom_op(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def straight_through(x, value: np.ndarray) -> Tensor:
    """Forward ``value`` while passing the gradient to ``x`` unchanged."""
    x = as_tensor(x)
    value = np.asarray(value, dtype=x.dtype)
    if value.shape != x.shape:
        raise DimensionError(f"straight_through: {value.shape} vs {x.shape}")
    return custom_op(value, (x,), lambda g: (g,), "straight_through")


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return custom_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- activations

def _sigmoid(v: np.ndarray) -> np.ndarray:
    return expit(v)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return custom_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return custom_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return custom_op(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(kind: str, x) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return custom_op(y, (x,), bw, "softmax")


def softmax_pool(logits, values, axis: int = -2) -> Tensor:
    """``sum(softmax(logits, axis) * values, axis)`` as one node.

    The gradient needs only the weights and the pooled output:
    d logits = w * g * (values - out).
    """
    logits, values = as_tensor(logits), as_tensor(values)
    if logits.shape != values.shape:
        raise DimensionError(f"softmax_pool: logits {logits.shape} vs values {values.shape}")
    w = np.exp(logits.data - logits.data.max(axis=axis, keepdims=True))
    w /= w.sum(axis=axis, keepdims=True)
    out = (w * values.data).sum(axis=axis)

    def bw(g):
        g = np.expand_dims(g, axis)
        wg = w * g
        gl = wg * (values.data - np.expand_dims(out, axis)) if logits.requires_grad else None
        return gl, wg

    return custom_op(out, (logits, values), bw, "softmax_pool")


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce_max(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along ``axis``; the gradient goes to the first (lowest-index) maximum."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"reduce_max: empty axis {axis} in shape {x.shape}")
    top = x.data.max(axis=axis, keepdims=True)
    out = top if keepdims else np.squeeze(top, axis=axis)

    def bw(g):
        # argmax over the boolean hit mask stops at the first hit, which is
        # faster than a float argmax and keeps the lowest-index tie rule
        arg = np.expand_dims(np.argmax(x.data == top, axis=axis), axis)
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, g, axis=axis)
        return (gx,)

    return custom_op(out, (x,), bw, "reduce_max")


def grouped_max(x, table: np.ndarray) -> Tensor:
    """Column-wise max over row groups: ``out[s] = max_l x[table[s, l]]``.

    ``x`` is 2-D and ``table`` an ``(S, L)`` row-index array; a group may list
    a row more than once.  The gradient goes to the row at the lowest slot
    attaining the max.
    """
    x = as_tensor(x)
    table = np.asarray(table, dtype=np.int64)
    if x.ndim != 2 or table.ndim != 2 or table.shape[1] == 0:
        raise DimensionError(f"grouped_max: table {table.shape} for rows {x.shape}")
    if table.size and (table.min() < 0 or table.max() >= x.shape[0]):
        raise IndexError(f"grouped_max: row index out of range for {x.shape[0]} rows")
    grouped = x.data[table]  # (S, L, C)
    top = grouped.max(axis=1, keepdims=True)

    def bw(g):
        slot = np.argmax(grouped == top, axis=1)  # (S, C), first hit
        rows = np.take_along_axis(table, slot, axis=1)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, np.arange(x.shape[1])[None, :]), g)  # rows may recur across groups
        return (gx,)

    return custom_op(top[:, 0], (x,), bw, "grouped_max")


def norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; zero vectors get a zero subgradient."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (g * x.data / safe * (n > 0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return custom_op(out, (x,), bw, "norm")


# ---------------------------------------------------------------- indexing

def _scatter_rows(g_rows: np.ndarray, flat_idx: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of ``g_rows`` into ``n_rows`` slots addressed by ``flat_idx``."""
    # one nonzero per column, so the CSC arrays can be written down directly
    m = sp.csc_matrix(
        (np.ones(flat_idx.size, dtype=g_rows.dtype), flat_idx, np.arange(flat_idx.size + 1)),
        shape=(n_rows, flat_idx.size),
    )
    return np.asarray(m @ g_rows)


def gather(x, indices) -> Tensor:
    """Select rows of ``x`` along axis 0; duplicates accumulate on backward."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"gather: index {bad} out of range for axis of length {n}")
    out = x.data[idx]
    tail = x.shape[1:]

    def bw(g):
        rows = g.reshape(idx.size, -1)
        return (_scatter_rows(rows, idx.ravel(), n).reshape((n,) + tail),)

    return custom_op(out, (x,), bw, "gather")


def batch_gather(x, indices) -> Tensor:
    """Per-batch row selection: ``out[b, ...] = x[b, indices[b, ...]]``.

    ``x`` has shape ``(B, N, *tail)`` and ``indices`` has shape ``(B, *q)``;
    the result has shape ``(B, *q, *tail)``.
    """
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    bsz, n = x.shape[0], x.shape[1]
    if idx.shape[0] != bsz:
        raise DimensionError(f"batch_gather: batch {bsz} vs indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"batch_gather: index {bad} out of range for axis of length {n}")
    tail = x.shape[2:]
    offsets = (np.arange(bsz) * n).reshape((bsz,) + (1,) * (idx.ndim - 1))
    flat = (idx + offsets).ravel()
    out = x.data.reshape((bsz * n,) + tail)[flat].reshape(idx.shape + tail)

    def bw(g):
        rows = g.reshape(flat.size, -1)
        return (_scatter_rows(rows, flat, bsz * n).reshape(x.shape),)

    return custom_op(out, (x,), bw, "batch_gather")


# ---------------------------------------------------------------- backward

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on.

    Leaf gradients accumulate; interior nodes receive their gradient and the
    graph is released, so a second call on the same loss is an error.
    Tensors in ``wrt`` that ``loss`` does not reach get a zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.dtype != parent.data.dtype:
                # mixed-precision graphs keep each gradient in its tensor's dtype
                pg = pg.astype(parent.data.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True

    for t in wrt:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------- checking

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |central|)``."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    backward(out, wrt=[leaf])
    analytic = leaf.grad.ravel()

    work = x0.copy()
    flat = work.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(Tensor(work.copy())).item()
        flat[i] = orig - eps
        down = f(Tensor(work.copy())).item()
        flat[i] = orig
        fd = (up - down) / (2.0 * eps)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    return worst
