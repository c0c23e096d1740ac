"""Dense float64 tensors with a small reverse-mode autodiff tape.

Only the operations the language model needs are provided.  Every op
computes its result eagerly with numpy; when a :class:`Tape` is active and
at least one input is tracked, the op also records a closure mapping the
output gradient to input gradients.

Dropout never appears as a stochastic node: masks are plain constant
tensors multiplied in with :func:`mul`.
"""

from __future__ import annotations

import builtins
import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array plus an optional gradient accumulator.

    Leaves created with ``requires_grad=True`` (model parameters) receive
    gradients in ``grad``.  Tensors produced by ops while a tape is active
    carry a ``node_id`` into that tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        t.tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node_id is not None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, data={self.data!r})"

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

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    segment: int
    saved_floats: int


_ACTIVE: list["Tape | None"] = []


def active_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on any enclosing tape."""
    _ACTIVE.append(None)
    try:
        yield
    finally:
        _ACTIVE.pop()


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction.  Leaf-gradient contributions are buffered per
    *segment* and added to ``leaf.grad`` in segment order at the end of a
    backward pass; recording two network copies in separate segments makes
    the parameter gradient an exact sum of per-copy gradients.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self.nodes: list[_Node] = []
        self._segment = 0
        self.visits = 0

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    @contextlib.contextmanager
    def segment(self, index: int) -> Iterator[None]:
        prev, self._segment = self._segment, int(index)
        try:
            yield
        finally:
            self._segment = prev

    def saved_floats(self) -> int:
        """Number of floats held alive by recorded intermediates."""
        total = 0
        for n in self.nodes:
            total += n.saved_floats
        return total

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward, saved_floats: int) -> None:
        out.node_id = len(self.nodes)
        out.tape = self
        self.nodes.append(_Node(parents, backward, self._segment, saved_floats))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None or loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, _Accum] = {loss.node_id: _Accum(np.ones_like(loss.data))}
        leaf_buffers: dict[int, dict[int, tuple[Tensor, _Accum]]] = {}
        for nid in range(loss.node_id, -1, -1):
            acc = grads.pop(nid, None)
            if acc is None:
                continue
            node = self.nodes[nid]
            self.visits += 1
            pgrads = node.backward(acc.value())
            for parent, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                if parent.node_id is not None and parent.tape is self:
                    slot = grads.get(parent.node_id)
                    if slot is None:
                        grads[parent.node_id] = _Accum(pg)
                    else:
                        slot.add(pg)
                elif parent.requires_grad:
                    buf = leaf_buffers.setdefault(node.segment, {})
                    entry = buf.get(id(parent))
                    if entry is None:
                        buf[id(parent)] = (parent, _Accum(pg))
                    else:
                        entry[1].add(pg)
        for seg in sorted(leaf_buffers):
            for leaf, acc in leaf_buffers[seg].values():
                g = acc.value()
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


class _Outer:
    """Deferred ``a.T @ g`` for a matmul's right operand."""

    __slots__ = ("a", "g")

    def __init__(self, a: np.ndarray, g: np.ndarray):
        self.a = a
        self.g = g


class _Accum:
    """Gradient accumulator for one node.

    Dense contributions are summed (copy-on-first-write, since ops may hand
    the same array to several parents).  Deferred outer products are stacked
    and materialized as a single matrix product.
    """

    __slots__ = ("dense", "owned", "outer_a", "outer_g")

    def __init__(self, pg):
        self.dense = None
        self.owned = False
        self.outer_a: list[np.ndarray] = []
        self.outer_g: list[np.ndarray] = []
        self.add(pg)

    def add(self, pg) -> None:
        if isinstance(pg, _Outer):
            self.outer_a.append(pg.a)
            self.outer_g.append(pg.g)
        elif self.dense is None:
            self.dense = pg
        elif self.owned:
            self.dense += pg
        else:
            self.dense = self.dense + pg
            self.owned = True

    def value(self) -> np.ndarray:
        if self.outer_a:
            if len(self.outer_a) == 1:
                prod = self.outer_a[0].T @ self.outer_g[0]
            else:
                prod = np.concatenate(self.outer_a).T @ np.concatenate(self.outer_g)
            self.outer_a, self.outer_g = [], []
            if self.dense is None:
                self.dense, self.owned = prod, True
            else:
                self.add(prod)
        return self.dense


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``.

    Gradients accumulate across calls until :meth:`Tensor.zero_grad`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise ValueError("loss is not attached to a tape")
    loss.tape.backward(loss)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x) -> Tensor:
    return Tensor._wrap(np.asarray(x, dtype=DTYPE))


def detach(t: Tensor) -> Tensor:
    """Same values, no gradient path (stop-gradient)."""
    return Tensor._wrap(t.data)


def _held(*ts: Tensor) -> int:
    # parameters and recorded outputs are counted elsewhere; only constants add memory
    return builtins.sum(t.size for t in ts if not t.tracked)


def _finish(op: str, arr: np.ndarray, parents: tuple[Tensor, ...], backward, saved=0) -> Tensor:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(p.tracked for p in parents):
        tape.record(out, parents, backward, saved + arr.size)
    return out


# --- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.tracked else None, _Outer(A, g) if b.tracked else None)

    return _finish("matmul", A @ B, (a, b), bw, _held(a, b))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _finish("transpose", a.data.T, (a,), lambda g: (g.T,))


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Column slice ``a[:, start:stop]``."""
    if a.data.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"bad column slice [{start}:{stop}] of {a.shape}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[:, start:stop] = g
        return (full,)

    return _finish("cols", a.data[:, start:stop], (a,), bw)


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Row-broadcast ``a[i, :] + bias``."""
    if a.data.ndim != 2 or bias.data.ndim != 1 or a.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias shape mismatch: {a.shape} + {bias.shape}")
    return _finish("add_bias", a.data + bias.data, (a, bias), lambda g: (g, g.sum(axis=0)))


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight``; the gradient scatters back additively."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding ids must be a vector")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError("token id out of range")
    shape = weight.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)

    return _finish("embedding", weight.data[ids], (weight,), bw)


# --- elementwise ----------------------------------------------------------


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=DTYPE).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    A, B = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * B, A.shape) if a.tracked else None,
            _unbroadcast(g * A, B.shape) if b.tracked else None,
        )

    return _finish("mul", A * B, (a, b), bw, _held(a, b))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _finish("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _finish("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _finish("square", x * x, (a,), lambda g: (2.0 * g * x,), _held(a))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all entries, accumulated in index order."""
    shape = a.shape
    total = np.add.reduce(a.data.reshape(-1))
    return _finish("sum", np.asarray(total, dtype=DTYPE), (a,), lambda g: (np.full(shape, float(g), dtype=DTYPE),))


def sum_squares(a: Tensor) -> Tensor:
    return sum(square(a))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "square": square,
}


def elementwise(op_kind: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*args)


# --- loss -----------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Token-level ``-log softmax(logits)[target]``.

    Accepts a single logit vector with an integer target (scalar result) or
    a ``(B, m)`` batch with ``B`` targets (vector of per-row losses).
    """
    single = logits.data.ndim == 1
    z = logits.data.reshape(1, -1) if single else logits.data
    if z.ndim != 2:
        raise ShapeError("logits must be a vector or a matrix")
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape != (z.shape[0],):
        raise ShapeError(f"expected {z.shape[0]} targets, got shape {t.shape}")
    m = z.shape[1]
    if t.min() < 0 or t.max() >= m:
        raise IndexError(f"target out of range for {m} classes")
    rows = np.arange(z.shape[0])
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1)
    losses = np.log(denom) - shifted[rows, t]
    probs = expz / denom[:, None]

    def bw(g):
        gg = np.atleast_1d(g).reshape(-1, 1) * probs
        gg[rows, t] -= np.atleast_1d(g).reshape(-1)
        return (gg.reshape(logits.shape),)

    out = losses.reshape(()) if single else losses
    return _finish("softmax_cross_entropy", out, (logits,), bw, probs.size)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = np.exp(z - z.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)
