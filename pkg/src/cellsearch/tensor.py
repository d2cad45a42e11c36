"""Dense tensors and the recording tape for reverse-mode differentiation.

Every differentiable primitive in :mod:`cellsearch.functional` records a node
on the *active* tape (entered with ``with Tape() as tape:``).  Outside a tape
the primitives only compute values, which is how inference runs.

Gradient semantics: ``tape.backward(loss)`` accumulates into ``.grad`` of
every leaf tensor with ``requires_grad=True`` that is reachable from the
loss.  Unreachable leaves keep whatever ``.grad`` they had (``None`` after
:func:`zero_grad`).
"""

from __future__ import annotations

import threading
from typing import Callable, List, Optional, Sequence

import numpy as np

from .exceptions import NonFiniteError, TapeError

_DTYPE = np.float64
_state = threading.local()


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    """Switch the default float type (``np.float64`` or ``np.float32``).

    The 32-bit mode is a convenience for quick experiments; gradient checks
    assume 64-bit.
    """
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("name", "inputs", "out_id", "backward_fn")

    def __init__(self, name, inputs, out_id, backward_fn):
        self.name = name
        self.inputs = inputs
        self.out_id = out_id
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of primitive applications.

    Nodes are stored in execution order, which is a topological order by
    construction; :meth:`backward` walks them in exact reverse.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._next_id = 0
        self._consumed = False
        self.recorded_floats = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self._consumed = False
        self.recorded_floats = 0

    def record(self, name: str, inputs: Sequence["Tensor"], out_data: np.ndarray,
               backward_fn: Callable) -> "Tensor":
        if self._consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        out = Tensor(out_data, requires_grad=True)
        out.tape_id = self._next_id
        out._tape = self
        self._next_id += 1
        self.nodes.append(Node(name, tuple(inputs), out.tape_id, backward_fn))
        self.recorded_floats += out.data.size
        return out

    def backward(self, loss: "Tensor") -> None:
        if self._consumed:
            raise TapeError("backward() called twice on the same tape without reset()")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("non-finite loss at backward()", location=f"tape node {loss.tape_id}")
        grads = {loss.tape_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.tape_id is None:
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=t.data.dtype, copy=True)
                    else:
                        t.grad += gi
                else:
                    prev = grads.get(t.tape_id)
                    grads[t.tape_id] = gi if prev is None else prev + gi
        self._consumed = True
        self.nodes = []


class Tensor:
    """n-dimensional float array with an optional gradient buffer.

    ``tape_id`` is ``None`` for leaves and constants, otherwise the id of the
    producing node on the tape that recorded it.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, np.ndarray) and data.dtype == _DTYPE:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.tape_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced on a tape")
        self._tape.backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from . import functional as F
        return F.getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=True, name=name)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None
