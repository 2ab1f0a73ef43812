"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient.  :func:`backward` then walks the tape in
exact reverse recording order, so gradient accumulation order (and hence
every bit of every gradient) is fixed by the order the forward pass ran in.

Broadcasting is deliberately limited: :func:`add` accepts a rank-1 second
operand that is repeated over the leading batch dimension, nothing else.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "DivisibilityError",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "concat",
    "dot",
    "embedding_lookup",
    "grad_enabled",
    "matmul",
    "mul",
    "no_grad",
    "permute",
    "record",
    "scale",
    "sigmoid",
    "softmax_cross_entropy",
    "split",
    "sub",
    "tanh",
    "tensor_sum",
    "transpose",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DivisibilityError(ShapeError):
    """A dimension is not divisible by the requested group count."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of the operations executed while it is active.

    Use as a context manager; a fresh tape per training step keeps the
    graph lifetime to exactly one step::

        with Tape():
            loss = model.loss(x, y)
            backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, inputs, output, backward_fn) -> int:
        self.nodes.append(_Node(op, tuple(inputs), output, backward_fn))
        return len(self.nodes) - 1

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
        _local.default = Tape()
        _local.grad = True
    return _local.tapes


def active_tape() -> Tape:
    """Innermost tape entered on this thread, else the thread's default tape."""
    stack = _stack()
    return stack[-1] if stack else _local.default


def reset_default_tape() -> None:
    _stack()
    _local.default = Tape()


def grad_enabled() -> bool:
    _stack()
    return _local.grad


@contextlib.contextmanager
def no_grad():
    """Disable recording on this thread (evaluation, cache export)."""
    _stack()
    prev = _local.grad
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"dimension sizes must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.tape_id = None
        t._tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.tape_id is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, inputs: Sequence[Tensor], data: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and put it on the active tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input.  Public so that tests and extensions can define new operations.
    """
    out = Tensor._wrap(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        tape = active_tape()
        out.requires_grad = True
        out.tape_id = tape.record(op, inputs, out, backward_fn)
        out._tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add to whatever is already stored; call ``zero_grad`` between
    steps.  Calling twice on the same loss therefore doubles the gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss.tape_id is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = loss._tape
    pending: dict[int, np.ndarray] = {loss.tape_id: seed}
    for idx in range(loss.tape_id, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is tape and t.tape_id is not None:
                prev = pending.get(t.tape_id)
                pending[t.tape_id] = gi if prev is None else prev + gi
            else:
                t.grad = np.array(gi, dtype=DTYPE) if t.grad is None else t.grad + gi


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a: [r x c] (or [c]) and b: [c x d]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def bw(g):
        if A.ndim == 1:
            return g @ B.T, np.outer(A, g)
        return g @ B.T, A.T @ g

    return record("matmul", (a, b), out, bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got {a.shape}")
    return record("transpose", (a,), a.data.T, lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be rank-1 and repeated over leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return record("add", (a, b), a.data + b.data, lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return record("add_bias", (a, b), a.data + b.data, lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return record("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or constant array of the same shape."""
    c = np.asarray(c, dtype=DTYPE)
    if c.ndim and c.shape != a.shape:
        raise ShapeError(f"scale: constant of shape {c.shape} for tensor {a.shape}")
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form: no overflow for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.full(shape, g, dtype=DTYPE),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected equal rank-1 shapes, got {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return record("dot", (a, b), np.asarray(A @ B), lambda g: (g * B, g * A))


def _slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[..., start:stop] = g
        return (full,)

    return record("slice", (a,), a.data[..., start:stop], bw)


def split(x: Tensor, g: int) -> list[Tensor]:
    """Cut the last axis into ``g`` equal contiguous chunks, in order."""
    if g < 1:
        raise DivisibilityError(f"group count must be positive, got {g}")
    d = x.shape[-1]
    if d % g:
        raise DivisibilityError(f"cannot split width {d} into {g} equal groups")
    if g == 1:
        return [x]
    w = d // g
    return [_slice_last(x, j * w, (j + 1) * w) for j in range(g)]


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join along ``axis``; all other dimensions must agree."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    if len(parts) == 1:
        return parts[0]
    ndim = parts[0].ndim
    ax = axis % ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return record("concat", parts, out, lambda g: tuple(np.split(g, bounds, axis=ax)))


def permute(x: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder the last axis: ``out[..., i] = x[..., perm[i]]``."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(x.shape[-1])):
        raise ShapeError(f"permute: not a permutation of {x.shape[-1]} features")
    inv = np.argsort(perm)
    return record("permute", (x,), x.data[..., perm], lambda g: (g[..., inv],))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be rank 2, got {table.shape}")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = ids[(ids < 0) | (ids >= V)][0]
        raise IndexError(f"token id {int(bad)} out of range [0, {V})")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return record("lookup", (table,), table.data[ids], bw)


def softmax_cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``targets`` under row-wise softmax of logits.

    ``reduction`` is ``"mean"`` or ``"sum"`` over rows.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B x V], got {logits.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    B, V = logits.shape
    if targets.shape[0] != B:
        raise ShapeError(f"{targets.shape[0]} targets for {B} logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    rows = np.arange(B)
    shift = logits.data.max(axis=1, keepdims=True)
    ez = logits.data - shift
    picked = ez[rows, targets]
    np.exp(ez, out=ez)
    denom = ez.sum(axis=1)
    nll = np.log(denom) - picked
    norm = B if reduction == "mean" else 1

    def bw(g):
        p = ez * (g / norm / denom)[:, None]
        p[rows, targets] -= g / norm
        return (p,)

    return record("xent", (logits,), np.asarray(nll.sum() / norm), bw)
