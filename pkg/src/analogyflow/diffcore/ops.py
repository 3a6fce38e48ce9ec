"""Differentiable primitives.

Broadcasting is limited to scalar-against-tensor; the only other
shape-expanding primitive is :func:`add_row`, which adds a vector to every
row of a matrix (used for biases).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, tape_of


class NonFiniteError(FloatingPointError):
    pass


def _result(value: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = tape_of(inputs)
    out = Tensor(value, tape=tape, _owned=True)
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.size == 1 and t.data.ndim <= 1


def _reduce_to(g: np.ndarray, target: Tensor) -> np.ndarray:
    if g.shape == target.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(target.shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "mul")
    av, bv = a.data, b.data
    return _result(
        av * bv,
        (a, b),
        lambda g: (_reduce_to(g * bv, a), _reduce_to(g * av, b)),
        "mul",
    )


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """Add a length-n vector to every row of an (..., n) tensor."""
    x, row = _pair(x, row)
    if row.data.ndim != 1 or x.shape[-1] != row.shape[0]:
        raise ShapeError(f"add_row: cannot add {row.shape} to rows of {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _result(x.data + row.data, (x, row), lambda g: (g, g.sum(axis=axes)), "add_row")


def matmul(lhs: Tensor, rhs: Tensor) -> Tensor:
    lhs, rhs = _pair(lhs, rhs)
    if lhs.data.ndim != 2 or rhs.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {lhs.shape} and {rhs.shape}")
    if lhs.shape[1] != rhs.shape[0]:
        raise ShapeError(f"matmul: inner extents differ ({lhs.shape} x {rhs.shape})")
    lv, rv = lhs.data, rhs.data
    return _result(lv @ rv, (lhs, rhs), lambda g: (g @ rv.T, lv.T @ g), "matmul")


def bmatvec(mats: Tensor, vecs: Tensor) -> Tensor:
    """Per-row matrix-vector products: (b, p, q) x (b, q) -> (b, p)."""
    mats, vecs = _pair(mats, vecs)
    if mats.data.ndim != 3 or vecs.data.ndim != 2:
        raise ShapeError(f"bmatvec needs (b,p,q) and (b,q), got {mats.shape} and {vecs.shape}")
    if mats.shape[0] != vecs.shape[0] or mats.shape[2] != vecs.shape[1]:
        raise ShapeError(f"bmatvec: {mats.shape} and {vecs.shape} do not agree")
    mv, vv = mats.data, vecs.data

    def back(g):
        return g[:, :, None] * vv[:, None, :], np.matmul(mv.transpose(0, 2, 1), g[:, :, None])[:, :, 0]

    return _result(np.matmul(mv, vv[:, :, None])[:, :, 0], (mats, vecs), back, "bmatvec")


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {x.shape}")
    return _result(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        value = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {tuple(shape)}: {exc}") from None
    return _result(value.copy(), (x,), lambda g: (g.reshape(old),), "reshape")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient 1 strictly inside, 0 elsewhere."""
    x = as_tensor(x)
    if lo > hi:
        raise ValueError(f"clamp: empty interval [{lo}, {hi}]")
    active = (x.data > lo) & (x.data < hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * active,), "clamp")


def sum(x: Tensor) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    return _result(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
        "sum",
    )


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    inv = x.dtype.type(1.0 / n)
    return _result(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g * inv, shape).copy(),),
        "mean",
    )


def mse(a, b) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    c = a.dtype.type(2.0 / diff.size)

    def back(g):
        ga = g * c * diff
        return ga, -ga

    return _result(np.asarray(np.mean(diff * diff), dtype=a.dtype), (a, b), back, "mse")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat of nothing")
    first = next((p for p in parts if isinstance(p, Tensor)), None)
    tensors = tuple(as_tensor(p, like=first) for p in parts)
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors:
        if t.data.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, back, "concat")


def slice(x: Tensor, index) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), back, "slice")


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows needs a matrix, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row ids out of range for a table with {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(table.data[idx], (table,), back, "take_rows")


def softmax(logits: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by max-subtraction."""
    logits = as_tensor(logits)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise ShapeError("softmax of an empty tensor")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    p = ex / ex.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (logits,), back, "softmax")


def square(x: Tensor) -> Tensor:
    return mul(x, x)
