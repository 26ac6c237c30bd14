"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Operations (see
:mod:`conviformer.ops`) only record themselves when a :class:`GradTape` is
active on the current thread and at least one input requires a gradient::

    with GradTape() as tape:
        loss = ops.sum(ops.mul(x, x))
    tape.backward(loss)          # x.grad == 2 * x.data

Outside a tape, operations are plain numpy computations.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError

FLOAT_TYPES = (np.float32, np.float64)

_state = threading.local()
_check_finite = True


def set_finite_check(enabled: bool) -> bool:
    """Toggle the per-op NaN/Inf check. Returns the previous setting."""
    global _check_finite
    prev, _check_finite = _check_finite, bool(enabled)
    return prev


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional["GradTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_TYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True
        self.name = name
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar; the real work lives in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradTape:
    """Ordered record of differentiable operations on one thread.

    Nodes are appended in creation order, which is already a topological
    order, so backward simply replays them in reverse.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn, str]] = []
        self._owner = threading.get_ident()
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn, op: str) -> None:
        if threading.get_ident() != self._owner:
            raise ContractError("a GradTape is confined to the thread that created it")
        self.nodes.append((out, inputs, backward, op))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every leaf that ``loss`` depends on."""
        if loss.data.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise ContractError("this tape has already been replayed")
        if not loss.requires_grad:
            raise ContractError("loss was not produced under an active tape")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"loss is not finite: {loss.data.reshape(-1)[0]}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn, op in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, tg in zip(inputs, in_grads):
                if tg is None or not t.requires_grad:
                    continue
                if tg.shape != t.shape:
                    raise ContractError(f"{op}: gradient shape {tg.shape} != input shape {t.shape}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + tg
                else:
                    grads[key] = tg
                if t.is_leaf:
                    leaves[key] = t
        for key, t in leaves.items():
            g = np.asarray(grads[key], dtype=t.dtype)
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.nodes.clear()
        self._consumed = True


def backward(loss: Tensor, tape: GradTape | None = None) -> None:
    """Run backward on ``tape`` (default: the tape that recorded ``loss``)."""
    tape = tape or loss._tape or active_tape()
    if tape is None:
        raise ContractError("loss was not produced under an active tape; wrap the forward pass in `with GradTape()`")
    tape.backward(loss)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op output and record it on the active tape when needed."""
    data = np.asarray(data)
    if _check_finite and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else data.copy(order="C")
    out.grad = None
    out.name = None
    out.is_leaf = False
    out.requires_grad = False
    out._tape = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.record(out, inputs, backward, op)
    return out
