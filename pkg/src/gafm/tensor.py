"""Dense tensors with tape-recorded reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations are :class:`Function`
subclasses; when a :class:`Tape` is active and any input requires a gradient,
the call is appended to the tape. :func:`backward` replays the tape in reverse.

Recording only happens inside ``with Tape():``. Outside a tape, ops are plain
numpy evaluations, which is what finite-difference probes and inference want.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Any, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Function",
    "backward",
    "current_tape",
    "precision",
    "get_precision",
    "set_precision",
    "default_dtype",
    "ShapeError",
    "ConfigError",
    "TapeError",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An operation was configured with impossible parameters."""


class TapeError(RuntimeError):
    """Backward was requested on a tensor that is not on the active tape."""


_DTYPES = {"single": np.float32, "double": np.float64}

_local = threading.local()
_generations = itertools.count(1)


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def get_precision() -> str:
    return getattr(_local, "precision", "single")


def set_precision(mode: str) -> None:
    if mode not in _DTYPES:
        raise ConfigError(f"precision must be one of {sorted(_DTYPES)}, got {mode!r}")
    _local.precision = mode


@contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the default floating dtype (``single`` or ``double``)."""
    previous = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


def default_dtype() -> type:
    return _DTYPES[get_precision()]


def current_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("fn", "inputs", "out_id")

    def __init__(self, fn: "Function", inputs: tuple, out_id: int):
        self.fn = fn
        self.inputs = inputs
        self.out_id = out_id


class Tape:
    """Ordered log of differentiable operations.

    Used as a context manager. Records are appended in execution order, so the
    list is topologically sorted by construction. Tensors produced under a tape
    become detached once the context exits.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.generation = next(_generations)
        self.closed = False

    def __enter__(self) -> "Tape":
        if self.closed:
            raise TapeError("a closed tape cannot be reopened")
        if _stack():
            raise TapeError("another tape is already recording in this thread")
        _stack().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        self.closed = True

    def __len__(self) -> int:
        return len(self.records)

    def record(self, fn: "Function", inputs: tuple, out: "Tensor") -> None:
        out.node_id = len(self.records)
        out._tape = self
        self.records.append(_Record(fn, inputs, out.node_id))


def _as_array(data: Any, dtype: Any) -> np.ndarray:
    if isinstance(data, (np.ndarray, np.floating)) and dtype is None and data.dtype in (np.float32, np.float64):
        return np.asarray(data)
    return np.asarray(data, dtype=dtype or default_dtype())


class Tensor:
    """n-dimensional float array that can take part in a recorded graph."""

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def is_leaf(self) -> bool:
        return self.node_id is None

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype: Any) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; implementations live in gafm.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def sum(self) -> "Tensor":
        from . import ops
        return ops.sum(self)

    def mean(self) -> "Tensor":
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape: int) -> "Tensor":
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class Function:
    """Base class for differentiable operations.

    ``forward`` receives raw arrays (plus keyword configuration) and may stash
    whatever it needs on ``self``. ``backward`` receives the output gradient
    and returns one gradient (or ``None``) per tensor input.
    """

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls()
        out = Tensor(fn.forward(*(t.data for t in inputs), **kwargs))
        tape = current_tape()
        if tape is not None and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            tape.record(fn, inputs, out)
        return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    The tape is left intact, so calling this twice doubles the gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.node_id is None:
        raise TapeError("loss was not recorded on a tape (nothing requires grad?)")
    if tape is not current_tape():
        raise TapeError("loss belongs to a detached tape; call backward inside its context")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for rec in reversed(tape.records[: loss.node_id + 1]):
        g = grads.pop(rec.out_id, None)
        if g is None:
            continue
        in_grads = rec.fn.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is tape and t.node_id is not None:
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
            elif t.node_id is None:
                gi = np.asarray(gi, dtype=t.dtype).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
