"""Dense float64 tensors with taped reverse-mode differentiation.

A forward pass executed inside a ``with ComputationRecord():`` block logs
every primitive operation in execution order. ``backward`` replays the log
in reverse, accumulating adjoints, and deposits a gradient for every
parameter registered in a :class:`ParameterStore` (zeros for parameters the
loss never touched). Outside a record, the same operations run without any
bookkeeping, which is what evaluation code uses.

Storage is row-major numpy float64 throughout; there is no broadcasting
beyond what the adjoints can undo (matching shapes, scalars, and
trailing-axis bias adds).
"""

from __future__ import annotations

from typing import Callable, Iterator, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError

Array = np.ndarray

_ACTIVE_RECORDS: list["ComputationRecord"] = []


def is_recording() -> bool:
    return bool(_ACTIVE_RECORDS)


class Tensor:
    """A dense float64 array, optionally attached to a computation record."""

    __slots__ = ("data", "_rec", "_const")

    def __init__(self, data, const: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self._rec: ComputationRecord | None = None
        self._const = const

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data

    # arithmetic sugar; all routes through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, const={self._const})"


def constant(x) -> Tensor:
    """Wrap data as a tensor that never receives a gradient."""
    return Tensor(x, const=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, const=True)


class _Entry:
    __slots__ = ("outputs", "inputs", "backward")

    def __init__(self, outputs, inputs, backward):
        self.outputs: tuple[Tensor, ...] = outputs
        self.inputs: tuple[Tensor, ...] = inputs
        self.backward = backward


class ComputationRecord:
    """Ordered log of the primitive operations of one forward pass."""

    def __init__(self):
        self._entries: list[_Entry] = []

    def __enter__(self) -> "ComputationRecord":
        _ACTIVE_RECORDS.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_RECORDS.pop()
        assert popped is self, "computation records must unwind in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._entries)


def record_op(outputs, inputs: Sequence[Tensor], backward) -> None:
    """Attach a custom primitive to the active record (no-op when idle).

    ``backward`` receives one adjoint array per output (zeros substituted for
    unused outputs) and must return one gradient array, or None, per input.
    """
    if not _ACTIVE_RECORDS:
        return
    outs = outputs if isinstance(outputs, tuple) else (outputs,)
    rec = _ACTIVE_RECORDS[-1]
    rec._entries.append(_Entry(outs, tuple(inputs), backward))
    for o in outs:
        o._rec = rec


class ParameterStore:
    """Named parameter tensors plus the gradients of the last backward pass.

    Registration with ``regularized=True`` marks the tensor as a weight in
    the L2 sense; biases and embeddings-vs-weights policy is decided by the
    caller at registration time.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._grads: dict[str, Array] = {}
        self._regularized: list[str] = []

    def register(self, name: str, value, regularized: bool = False) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        self._params[name] = t
        self._grads[name] = np.zeros_like(t.data)
        if regularized:
            self._regularized.append(name)
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def grad(self, name: str) -> Array:
        return self._grads[name]

    def zero_grads(self) -> None:
        for name, p in self._params.items():
            self._grads[name] = np.zeros_like(p.data)

    @property
    def regularized_names(self) -> list[str]:
        return list(self._regularized)

    def state_dict(self) -> dict[str, Array]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, Array]) -> None:
        for name, p in self._params.items():
            if name not in state:
                raise ContractError(f"state dict is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {arr.shape} != model shape {p.data.shape}"
                )
            p.data[...] = arr


def backward(loss: Tensor, store: ParameterStore) -> None:
    """Fill ``store`` gradients with d(loss)/d(param); zeros where unreached."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    rec = loss._rec
    if rec is not None:
        for entry in reversed(rec._entries):
            out_grads = [grads.pop(id(o), None) for o in entry.outputs]
            if all(g is None for g in out_grads):
                continue
            out_grads = [
                np.zeros_like(o.data) if g is None else g
                for g, o in zip(out_grads, entry.outputs)
            ]
            in_grads = entry.backward(*out_grads)
            for t, g in zip(entry.inputs, in_grads):
                if g is None:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = g if prev is None else prev + g
    for name, p in store._params.items():
        g = grads.get(id(p))
        if g is None:
            store._grads[name] = np.zeros_like(p.data)
        else:
            store._grads[name] = np.asarray(g, dtype=np.float64).reshape(p.data.shape)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum an adjoint back down to the shape numpy broadcast it up from."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_data(a: Tensor, b: Tensor, op) -> Array:
    try:
        return op(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are incompatible") from exc


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(_binary_data(a, b, np.add))

    def bwd(g):
        ga = None if a._const else _unbroadcast(g, a.shape)
        gb = None if b._const else _unbroadcast(g, b.shape)
        return ga, gb

    record_op(out, (a, b), bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(_binary_data(a, b, np.subtract))

    def bwd(g):
        ga = None if a._const else _unbroadcast(g, a.shape)
        gb = None if b._const else _unbroadcast(-g, b.shape)
        return ga, gb

    record_op(out, (a, b), bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(_binary_data(a, b, np.multiply))

    def bwd(g):
        ga = None if a._const else _unbroadcast(g * b.data, a.shape)
        gb = None if b._const else _unbroadcast(g * a.data, b.shape)
        return ga, gb

    record_op(out, (a, b), bwd)
    return out


def neg(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(-a.data)
    record_op(out, (a,), lambda g: (None if a._const else -g,))
    return out


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _wrap(a)
    c = float(c)
    out = Tensor(a.data * c)
    record_op(out, (a,), lambda g: (None if a._const else g * c,))
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = None if a._const else g @ b.data.T
        gb = None if b._const else a.data.T @ g
        return ga, gb

    record_op(out, (a, b), bwd)
    return out


def _stable_sigmoid(x: Array) -> Array:
    # exp() is only ever taken of non-positive values, so it cannot overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out_data = _stable_sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    out = Tensor(out_data)
    record_op(out, (a,), lambda g: (None if a._const else g * out_data * (1.0 - out_data),))
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0))
    record_op(out, (a,), lambda g: (None if a._const else g * (a.data > 0.0),))
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.log(a.data))
    record_op(out, (a,), lambda g: (None if a._const else g / a.data,))
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient passes through wherever no clamping bit."""
    a = _wrap(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    record_op(out, (a,), lambda g: (None if a._const else g * mask,))
    return out


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    shape = a.shape

    def bwd(g):
        if a._const:
            return (None,)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    record_op(out, (a,), bwd)
    return out


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.mean(a.data, axis=axis, keepdims=keepdims))
    shape = a.shape
    count = a.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def bwd(g):
        if a._const:
            return (None,)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    record_op(out, (a,), bwd)
    return out


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape))
    record_op(out, (a,), lambda g: (None if a._const else g.reshape(a.shape),))
    return out


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T)
    record_op(out, (a,), lambda g: (None if a._const else g.T,))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(None if p._const else piece for p, piece in zip(parts, pieces))

    record_op(out, tuple(parts), bwd)
    return out


def gather_rows(table, indices) -> Tensor:
    """Row lookup ``table[indices]``; the adjoint scatter-adds rows back."""
    table = _wrap(table)
    idx = np.ascontiguousarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D table, got {table.shape}")
    out = Tensor(table.data[idx])

    def bwd(g):
        if table._const:
            return (None,)
        acc = np.zeros_like(table.data)
        kernels.scatter_add_rows(acc, idx, np.ascontiguousarray(g))
        return (acc,)

    record_op(out, (table,), bwd)
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


def finite_difference_gradients(
    fn: Callable[[], Tensor],
    store: ParameterStore,
    step: float = 1e-6,
    names: Sequence[str] | None = None,
) -> dict[str, Array]:
    """Central-difference gradients of ``fn()`` wrt every parameter entry.

    ``fn`` must be a deterministic closure over the store's parameters; it is
    re-evaluated 2x per scalar entry with the entry nudged by +/-step.
    """
    out: dict[str, Array] = {}
    for name in names if names is not None else store.names():
        p = store[name]
        flat = p.data.reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * step)
        out[name] = grad.reshape(p.data.shape)
    return out


def max_relative_gradient_error(
    fn: Callable[[], Tensor],
    store: ParameterStore,
    step: float = 1e-6,
    names: Sequence[str] | None = None,
) -> float:
    """Worst |analytic - fd| / max(|analytic|, 1e-8) over all parameter entries."""
    with ComputationRecord():
        loss = fn()
        backward(loss, store)
    analytic = {name: store.grad(name).copy() for name in store.names()}
    numeric = finite_difference_gradients(fn, store, step=step, names=names)
    worst = 0.0
    for name, fd in numeric.items():
        an = analytic[name]
        rel = np.abs(an - fd) / np.maximum(np.abs(an), 1e-8)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
