"""Dense double-precision tensors with reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent. ``backward`` walks the recorded graph in reverse
topological order. Only leaves accumulate into ``.grad`` across calls.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results are plain values."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, float(x)))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, fn: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.grad = None
    if needs:
        out.parents = parents
        out._backward = fn
    else:
        out.parents = ()
        out._backward = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (a,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), "tanh", lambda g: (g * (1.0 - y * y),))


_ELEMENTWISE = {"add": add, "mul": mul, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(kind: str, *args: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b``.

    ``cond`` is a constant boolean array broadcastable to the operand shape,
    typically a ``[batch, 1]`` column of step masks.
    """
    _check_same(a, b, "where")
    c = np.broadcast_to(np.asarray(cond, dtype=bool), a.shape)
    return _make(
        np.where(c, a.data, b.data),
        (a, b),
        "where",
        lambda g: (np.where(c, g, 0.0), np.where(c, 0.0, g)),
    )


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a bias row ``b[n]`` to every row of ``x[m, n]``."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return _make(x.data + b.data, (x, b), "add_bias", lambda g: (g, g.sum(axis=0)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(y, (a,), "reshape", lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    if len(tensors) == 1:
        return tensors[0]
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), "concat", fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise DimensionError(f"stack: shapes {ref} and {t.shape} differ")
    ax = axis % (len(ref) + 1)
    n = len(tensors)

    def fn(g):
        return tuple(np.take(g, i, axis=ax) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=ax), tuple(tensors), "stack", fn)


def select(a: Tensor, index: int, axis: int) -> Tensor:
    """Slice out position ``index`` along ``axis``, dropping that axis."""
    shape = a.shape
    ax = axis % len(shape)

    def fn(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[ax] = index
        out[tuple(sl)] = g
        return (out,)

    return _make(np.take(a.data, index, axis=ax), (a,), "select", fn)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding: token id out of range for vocab of {vocab}")

    def fn(g):
        gw = np.zeros(weight.shape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), "embedding", fn)


# ---------------------------------------------------------------------------
# attention helpers


def batch_dot(keys: Tensor, query: Tensor) -> Tensor:
    """``out[b, s] = keys[b, s, :] . query[b, :]``."""
    if keys.data.ndim != 3 or query.data.ndim != 2 or keys.shape[0] != query.shape[0] or keys.shape[2] != query.shape[1]:
        raise DimensionError(f"batch_dot: keys {keys.shape} incompatible with query {query.shape}")
    k, q = keys.data, query.data

    def fn(g):
        return g[:, :, None] * q[:, None, :], np.einsum("bs,bsh->bh", g, k)

    return _make(np.einsum("bsh,bh->bs", k, q), (keys, query), "batch_dot", fn)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """``out[b, :] = sum_s weights[b, s] * values[b, s, :]``."""
    if weights.data.ndim != 2 or values.data.ndim != 3 or weights.shape != values.shape[:2]:
        raise DimensionError(f"weighted_sum: weights {weights.shape} incompatible with values {values.shape}")
    w, v = weights.data, values.data

    def fn(g):
        return np.einsum("bh,bsh->bs", g, v), w[:, :, None] * g[:, None, :]

    return _make(np.einsum("bs,bsh->bh", w, v), (weights, values), "weighted_sum", fn)


MASK_FILL = -1e9


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax with masked positions pushed to ``MASK_FILL`` first."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise DimensionError(f"masked_softmax: mask {mask.shape} vs scores {scores.shape}")
    if not mask.any(axis=-1).all():
        raise ContractError("masked_softmax: a row has every position masked")
    x = np.where(mask, scores.data, MASK_FILL)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (scores,), "masked_softmax", fn)


# ---------------------------------------------------------------------------
# loss


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(
    logits: Tensor,
    targets: Sequence[int] | np.ndarray,
    mask: Sequence[float] | np.ndarray | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Cross-entropy of row-wise softmax against integer targets.

    ``reduction="mean"`` averages over unmasked rows; ``"sum"`` adds them.
    An all-masked batch yields a zero loss with a zero gradient.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    if targets.shape != (n,) or mask.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {n} rows but targets {targets.shape}, mask {mask.shape}")
    live = mask > 0
    if live.any() and (targets[live].min() < 0 or targets[live].max() >= vocab):
        raise IndexError(f"softmax_cross_entropy: target id out of range for vocab of {vocab}")
    safe = np.where(live, targets, 0)
    logp = log_softmax(logits.data)
    picked = logp[np.arange(n), safe]
    count = mask.sum()
    if reduction == "mean":
        denom = count if count > 0 else 1.0
    elif reduction == "sum":
        denom = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    loss = -(picked * mask).sum() / denom

    def fn(g):
        grad = np.exp(logp)
        grad[np.arange(n), safe] -= 1.0
        return (grad * (mask / denom)[:, None] * g,)

    return _make(np.asarray(loss), (logits,), "softmax_cross_entropy", fn)


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Topologically ordered nodes reachable from a root (inputs first)."""

    nodes: list[Tensor]

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack_.append((p, False))
        return cls(order)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(root: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``.grad``."""
    if root.data.size != 1 or root.data.ndim != 0:
        raise ContractError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    graph = graph or Graph.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(())}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else np.array(g, dtype=np.float64)
            continue
        node.grad = g
        for p, pg in zip(node.parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
