"""Dense float64 tensors with reverse-mode differentiation.

Every array op used by the model and the adapter lives here as a small
primitive that knows its own backward rule. Graphs are recorded on the
tensors themselves; ``GradTape`` linearizes a graph below a root into
topological order and ``backward`` runs the reverse sweep over it.
Values are validated to stay finite after every public operation.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values produced by {where}")


class Tensor:
    """A float64 array plus the bookkeeping needed for the reverse sweep.

    ``_parents`` / ``_backward`` are populated only when the result requires
    a gradient, so evaluation-mode graphs carry no tape at all.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        _check_finite(self.data, "Tensor()")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Iterable[tuple["Tensor", np.ndarray]]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd, where: str) -> Tensor:
    _check_finite(data, where)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = bwd
    else:
        out._parents = ()
        out._backward = None
    return out


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Topologically ordered record of the graph below ``root``.

    Node order guarantees every tensor appears after all of its parents;
    ``leaves`` are the trainable inputs (no parents, requires_grad set).
    """

    def __init__(self, root: Tensor):
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.nodes = nodes
        self.leaves = [t for t in nodes if not t._parents and t.requires_grad]


def backward(loss: Tensor, leaves: list[Tensor] | None = None) -> None:
    """Reverse sweep from a scalar loss; accumulates ``.grad`` on trainable leaves.

    Leaves listed in ``leaves`` that the loss does not reach receive a zero
    gradient. Frozen tensors and intermediates get no gradient storage.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = GradTape(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            acc = flowing.get(id(parent))
            flowing[id(parent)] = pg if acc is None else acc + pg
    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _make(out_data, (a, b), bwd, "matmul")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        out = _make(a.data + float(b), (a,), lambda g: ((a, g),), "add")
        return out
    b = _wrap(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _make(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)), "add")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _make(a.data - float(b), (a,), lambda g: ((a, g),), "sub")
    b = _wrap(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _make(a.data - b.data, (a, b), lambda g: ((a, g), (b, -g)), "sub")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: ((a, g * c),), "mul")
    b = _wrap(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _make(a.data * b.data, (a, b), lambda g: ((a, g * b.data), (b, g * a.data)), "mul")


def scale_rows(m: Tensor, s: Tensor) -> Tensor:
    """Each row of ``m`` scaled by the matching entry of vector ``s``."""
    if m.data.ndim != 2 or s.data.ndim != 1 or m.data.shape[0] != s.data.shape[0]:
        raise ValueError(f"scale_rows shape mismatch: {m.data.shape} vs {s.data.shape}")
    out = m.data * s.data[:, None]

    def bwd(g):
        return ((m, g * s.data[:, None]), (s, np.sum(g * m.data, axis=1)))

    return _make(out, (m, s), bwd, "scale_rows")


def take_col(a: Tensor, j: int) -> Tensor:
    """Column ``j`` of a matrix, as a vector."""
    if a.data.ndim != 2:
        raise ValueError(f"take_col needs a matrix, got shape {a.data.shape}")
    if not (0 <= j < a.data.shape[1]):
        raise ValueError(f"column {j} out of range for shape {a.data.shape}")
    out = a.data[:, j].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, j] = g
        return ((a, full),)

    return _make(out, (a,), bwd, "take_col")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose needs a matrix, got shape {a.data.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: ((a, g.T),), "transpose")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"slice_cols needs a matrix, got shape {a.data.shape}")
    out = a.data[:, start:stop].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return ((a, full),)

    return _make(out, (a,), bwd, "slice_cols")


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ValueError(f"concat_cols shape mismatch: {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        return ((a, g[:, :na]), (b, g[:, na:]))

    return _make(out, (a, b), bwd, "concat_cols")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError(f"embedding ids must be a vector, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(f"embedding id out of range for table of {table.data.shape[0]} rows")
    out = table.data[ids].copy()

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return ((table, full),)

    return _make(out, (table,), bwd, "embedding")


def softmax(v) -> "Tensor":
    """Stable softmax over the last axis (max-subtraction in float64)."""
    t = _wrap(v)
    if t.data.size == 0:
        raise ValueError("softmax of empty input")
    x = t.data
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g):
        inner = np.sum(g * y, axis=-1, keepdims=True)
        return ((t, y * (g - inner)),)

    return _make(y, (t,), bwd, "softmax")


def top_k_mask(v, k: int) -> np.ndarray:
    """Zero all but the k largest entries; survivors keep their exact values.

    Ties resolve to the lowest index. Pure value-level utility: selection is
    piecewise constant, so it carries no gradient of its own.
    """
    arr = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"top_k_mask needs a vector, got shape {arr.shape}")
    if not (1 <= k <= arr.shape[0]):
        raise ValueError(f"k={k} out of range for vector of length {arr.shape[0]}")
    keep = np.argsort(-arr, kind="stable")[:k]
    out = np.zeros_like(arr)
    out[keep] = arr[keep]
    return out


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _GELU_C0 * (x + _GELU_C1 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x**2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
        return ((a, g * local),)

    return _make(out, (a,), bwd, "gelu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def bwd(g):
        return ((a, g * (1.0 - t**2)),)

    return _make(t, (a,), bwd, "tanh")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learnable gain/shift."""
    if a.data.ndim != 2:
        raise ValueError(f"layer_norm needs a matrix, got shape {a.data.shape}")
    x = a.data
    mu = np.mean(x, axis=1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        dgamma = np.sum(g * xhat, axis=0)
        dbeta = np.sum(g, axis=0)
        gy = g * gamma.data
        n = x.shape[1]
        dx = inv * (gy - np.mean(gy, axis=1, keepdims=True)
                    - xhat * np.mean(gy * xhat, axis=1, keepdims=True))
        del n
        return ((a, dx), (gamma, dgamma), (beta, dbeta))

    return _make(out, (a, gamma, beta), bwd, "layer_norm")


def row_logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(row))) per row, max-subtracted; backward is the row softmax."""
    if a.data.ndim != 2:
        raise ValueError(f"row_logsumexp needs a matrix, got shape {a.data.shape}")
    x = a.data
    m = np.max(x, axis=1)
    out = m + np.log(np.sum(np.exp(x - m[:, None]), axis=1))

    def bwd(g):
        sm = np.exp(x - out[:, None])
        return ((a, sm * g[:, None]),)

    return _make(out, (a,), bwd, "row_logsumexp")


def pick(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather a[rows[i], cols[i]] into a vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = a.data[rows, cols].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        return ((a, full),)

    return _make(out, (a,), bwd, "pick")


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(np.sum(a.data))
    return _make(out, (a,), lambda g: ((a, np.broadcast_to(g, a.data.shape).copy()),), "tsum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(np.mean(a.data))
    return _make(out, (a,), lambda g: ((a, np.broadcast_to(g / n, a.data.shape).copy()),), "tmean")


def dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError(f"dot shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = np.asarray(a.data @ b.data)
    return _make(out, (a, b), lambda g: ((a, g * b.data), (b, g * a.data)), "dot")


# ---------------------------------------------------------------------------
# verification


def finite_difference_check(f, x: Tensor, h: float) -> float:
    """Worst relative error between backward() and central differences.

    ``f`` must map a tensor to a scalar tensor. Denominators are floored at
    1e-8 so near-zero coordinates do not blow up the ratio.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.shape != ():
        raise ValueError(f"f must return a scalar, got shape {out.data.shape}")
    if not np.isfinite(out.data):
        raise ValueError("f returned a non-finite value")
    backward(out, leaves=[leaf])
    analytic = leaf.grad

    flat = leaf.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(leaf.data.copy())).item()
        flat[i] = orig - h
        lo = f(Tensor(leaf.data.copy())).item()
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * h)
    fd = fd.reshape(leaf.data.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(analytic - fd) / denom))
