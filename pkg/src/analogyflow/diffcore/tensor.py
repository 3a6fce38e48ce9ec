"""Immutable numpy-backed tensors recorded on an explicit tape."""

from __future__ import annotations

import itertools
from typing import Callable, Iterable

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A read-only array, optionally tracked by a :class:`Tape`.

    Untracked tensors behave as constants: operations on them compute values
    without recording anything.
    """

    __slots__ = ("data", "tape", "id", "name")

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None, _owned=False):
        if _owned:
            # numpy ufuncs on 0-d arrays return scalars, which cannot be flagged read-only
            arr = data if isinstance(data, np.ndarray) else np.asarray(data)
        else:
            arr = np.array(data, copy=True)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tracked = "tracked" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, {tracked})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; see ops.py for the implementations
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.slice(self, index)

    @property
    def T(self):
        from . import ops

        return ops.transpose(self)


Backward = Callable[[np.ndarray], "tuple[np.ndarray | None, ...]"]


class Tape:
    """Ordered record of primitive operations plus a registry of leaves."""

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []
        self._leaves: dict[str | int, Tensor] = {}

    def leaf(self, value, name: str | None = None) -> Tensor:
        t = Tensor(value, tape=self, name=name)
        key = name if name is not None else t.id
        if key in self._leaves:
            raise TapeError(f"leaf {key!r} registered twice")
        self._leaves[key] = t
        return t

    @property
    def leaves(self) -> dict[str | int, Tensor]:
        return dict(self._leaves)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Backward) -> None:
        self._records.append((out, inputs, backward))

    def __len__(self) -> int:
        return len(self._records)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if like is not None:
        arr = arr.astype(like.dtype)
    return Tensor(arr)


def tape_of(tensors: Iterable[Tensor]) -> "Tape | None":
    found = None
    for t in tensors:
        if t.tape is None:
            continue
        if found is None:
            found = t.tape
        elif t.tape is not found:
            raise TapeError("operands are recorded on different tapes")
    return found


def backward(loss: Tensor, tape: Tape) -> dict[str | int, Tensor]:
    """Gradients of a scalar ``loss`` for every leaf registered on ``tape``.

    Leaves that do not influence the loss get zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape and loss.tape is not None:
        raise TapeError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape._records):
        g = grads.pop(out.id, None)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or inp.tape is None:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    result = {}
    for key, leaf in tape._leaves.items():
        g = grads.get(leaf.id)
        if g is None:
            g = np.zeros_like(leaf.data)
        result[key] = Tensor(np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape))
    return result
