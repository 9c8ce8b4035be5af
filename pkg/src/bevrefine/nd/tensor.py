"""Dense float tensors recorded on a reverse-mode differentiation tape.

One tape per forward pass: ops append nodes eagerly while a `Tape` context is
active on the current thread, `Tape.gradients` replays them in reverse.
Tensors without a tape id are plain values and never receive gradients.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


class NumericFault(ArithmeticError):
    """An operation produced a non-finite (NaN/Inf) value."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape (detached loss, non-scalar loss, ...)."""


class ShapeError(ValueError):
    """Input shapes invalid for the requested operation."""


_default_dtype = np.float64
_finite_checks = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created from untyped data (f32 or f64)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


class dtype_scope:
    """Context manager that temporarily switches the default dtype."""

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        self.prev = default_dtype()
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self.prev)


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf screening (on by default)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def check_finite(kind: str, arr: np.ndarray) -> None:
    if not _finite_checks or arr.size == 0:
        return
    # min+max propagate NaN and keep Inf, so one comparison catches both
    lo = float(arr.min())
    hi = float(arr.max())
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise NumericFault(f"{kind} produced non-finite values")


class Tensor:
    """N-d float array, optionally tracked by the active tape.

    `requires_grad` marks a leaf whose gradient should be produced by
    `backward`; intermediate results receive a tape id when any of their
    inputs is tracked.
    """

    __slots__ = ("data", "requires_grad", "tape", "tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.type in FLOAT_DTYPES:
                arr = data
            else:
                arr = np.asarray(data, dtype=_default_dtype)
        else:
            arr = np.asarray(data, dtype=dtype)
            if arr.dtype.type not in FLOAT_DTYPES:
                raise ValueError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tape: Tape | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.tape_id is not None:
            flags.append(f"tape_id={self.tape_id}")
        tail = (", " + ", ".join(flags)) if flags else ""
        return f"Tensor(shape={self.shape}{tail})"

    # arithmetic sugar; the actual ops live in bevrefine.nd.ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, axes):
        from . import ops

        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class Tape:
    """Eager record of one forward pass; discarded after backward."""

    def __init__(self):
        self._nodes: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._next_id = 0
        self._leaf_by_obj: dict[int, int] = {}
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()

    def _fresh_id(self) -> int:
        i = self._next_id
        self._next_id = i + 1
        return i

    def register(self, out: Tensor) -> int:
        """Assign a tape id to an op output."""
        tid = self._fresh_id()
        out.tape = self
        out.tape_id = tid
        return tid

    def ensure_id(self, t: Tensor) -> int | None:
        """Tape id for an op input: existing id, a fresh leaf id, or None."""
        if t.tape is self and t.tape_id is not None:
            return t.tape_id
        if t.requires_grad:
            key = id(t)
            tid = self._leaf_by_obj.get(key)
            if tid is None:
                tid = self._fresh_id()
                self._leaf_by_obj[key] = tid
                self._leaves[tid] = t
                t.tape = self
                t.tape_id = tid
            return tid
        return None

    def leaf_id(self, t: Tensor) -> int | None:
        """Tape id of a leaf previously used under this tape, if any."""
        return self._leaf_by_obj.get(id(t))

    def push(self, out_id: int, in_ids: tuple[int | None, ...], grads_fn) -> None:
        """grads_fn(g, needs) yields per-input gradient arrays (or None)."""
        self._nodes.append((out_id, in_ids, grads_fn))

    def gradients(self, loss: Tensor) -> dict[int, Tensor]:
        """Reverse sweep from a scalar loss; map of leaf tape-id -> gradient.

        Consumes the tape: the node list (which pins every intermediate of the
        forward pass) is released before returning, so the memory of a forward
        is reclaimed by reference counting alone, without waiting for the
        cycle collector.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.tape is not self or loss.tape_id is None:
            raise TapeError("loss is not attached to this tape")
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        acc: dict[int, np.ndarray] = {
            loss.tape_id: np.ones_like(loss.data)
        }
        for out_id, in_ids, grads_fn in reversed(self._nodes):
            g = acc.pop(out_id, None)
            if g is None:
                continue
            needs = tuple(i is not None for i in in_ids)
            for tid, gx in zip(in_ids, grads_fn(g, needs)):
                if tid is None or gx is None:
                    continue
                held = acc.get(tid)
                if held is None:
                    acc[tid] = gx
                else:
                    held += gx
        out: dict[int, Tensor] = {}
        for tid, leaf in self._leaves.items():
            g = acc.get(tid)
            if g is None:
                g = np.zeros_like(leaf.data)
            out[tid] = Tensor(g)
        self._nodes.clear()
        self._leaves = {}
        self._leaf_by_obj = {}
        self._consumed = True
        return out

    def grad(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
        """Gradients of `loss` for specific leaves, in the given order."""
        tids = [self.leaf_by(t) for t in wrt]
        gmap = self.gradients(loss)
        out = []
        for t, tid in zip(wrt, tids):
            if tid is None or tid not in gmap:
                out.append(Tensor(np.zeros_like(t.data)))
            else:
                out.append(gmap[tid])
        return out

    def leaf_by(self, t: Tensor) -> int | None:
        return self._leaf_by_obj.get(id(t))


def current_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def recording_tape(*inputs: Tensor) -> Tape | None:
    """The tape this op should record on, or None for a plain computation."""
    tape = current_tape()
    if tape is None:
        return None
    for x in inputs:
        if x.requires_grad or (x.tape is tape and x.tape_id is not None):
            return tape
    return None


def record(out: Tensor, inputs: Sequence[Tensor], grads_fn) -> Tensor:
    """Attach `out` to the active tape if any input is tracked."""
    tape = recording_tape(*inputs)
    if tape is not None:
        in_ids = tuple(tape.ensure_id(x) for x in inputs)
        oid = tape.register(out)
        tape.push(oid, in_ids, grads_fn)
    return out


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Reverse-mode gradients of a scalar tape-attached loss, keyed by tape id."""
    if loss.tape is None or loss.tape_id is None:
        raise TapeError("loss is detached from any tape")
    return loss.tape.gradients(loss)
