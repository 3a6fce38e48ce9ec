"""Central-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import ops
from .tensor import Tape, Tensor, backward

ScalarFn = Callable[..., Tensor]


def numeric_grad(fn: ScalarFn, leaves: Mapping[str, np.ndarray], eps: float = 1e-6) -> dict[str, np.ndarray]:
    base = {k: np.array(v, dtype=np.float64) for k, v in leaves.items()}
    out = {}
    for name, value in base.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = float(fn(**{k: Tensor(v) for k, v in base.items()}).data)
            flat[i] = keep - eps
            down = float(fn(**{k: Tensor(v) for k, v in base.items()}).data)
            flat[i] = keep
            g.reshape(-1)[i] = (up - down) / (2 * eps)
        out[name] = g
    return out


def analytic_grad(fn: ScalarFn, leaves: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    tape = Tape()
    bound = {k: tape.leaf(np.asarray(v, dtype=np.float64), name=k) for k, v in leaves.items()}
    grads = backward(fn(**bound), tape)
    return {k: grads[k].data for k in leaves}


def grad_check(fn: ScalarFn, leaves: Mapping[str, np.ndarray], eps: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` receives one keyword argument per leaf and must return a scalar.
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    analytic = analytic_grad(fn, leaves)
    numeric = numeric_grad(fn, leaves, eps)
    worst = 0.0
    for name in leaves:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, w.reshape(out.shape)))


def primitive_cases(seed: int = 0, per_primitive: int = 20):
    """Yield ``(primitive, fn, leaves)`` gradient-check cases in f64.

    Each case contracts the primitive's output with random weights so no
    gradient is trivially zero.
    """
    g = np.random.default_rng(seed)

    def w(*shape):
        return g.normal(size=shape)

    for _ in range(per_primitive):
        m, k, n = (int(v) for v in g.integers(1, 5, size=3))
        x, y = w(m, k), w(m, k)
        wa = w(m, k)
        yield "add", (lambda x, y, wa=wa: _weighted(ops.add(x, y), wa)), {"x": x, "y": y}
        yield "sub", (lambda x, y, wa=wa: _weighted(ops.sub(x, y), wa)), {"x": x, "y": y}
        yield "mul", (lambda x, y, wa=wa: _weighted(ops.mul(x, y), wa)), {"x": x, "y": y}
        c = float(g.normal())
        yield "scale", (lambda x, wa=wa, c=c: _weighted(ops.scale(x, c), wa)), {"x": x}
        row = w(k)
        yield "add_row", (lambda x, row, wa=wa: _weighted(ops.add_row(x, row), wa)), {"x": x, "row": row}
        rhs, wm = w(k, n), w(m, n)
        yield "matmul", (lambda x, rhs, wm=wm: _weighted(ops.matmul(x, rhs), wm)), {"x": x, "rhs": rhs}
        mats, vecs, wb = w(m, n, k), w(m, k), w(m, n)
        yield "bmatvec", (lambda mats, vecs, wb=wb: _weighted(ops.bmatvec(mats, vecs), wb)), {
            "mats": mats,
            "vecs": vecs,
        }
        wt = w(k, m)
        yield "transpose", (lambda x, wt=wt: _weighted(ops.transpose(x), wt)), {"x": x}
        yield "reshape", (lambda x, wa=wa, m=m, k=k: _weighted(ops.reshape(x, (k * m,)), wa)), {"x": x}
        yield "tanh", (lambda x, wa=wa: _weighted(ops.tanh(x), wa)), {"x": x}
        # keep clamp inputs away from the kinks so differences stay one-sided-free
        cx = g.uniform(-2, 2, size=(m, k))
        cx = np.where(np.abs(np.abs(cx) - 1.0) < 1e-2, cx * 0.5, cx)
        yield "clamp", (lambda x, wa=wa: _weighted(ops.clamp(x, -1.0, 1.0), wa)), {"x": cx}
        yield "sum", (lambda x: ops.sum(ops.mul(x, x))), {"x": x}
        yield "mean", (lambda x: ops.mean(ops.tanh(x))), {"x": x}
        yield "mse", (lambda x, y: ops.mse(x, y)), {"x": x, "y": y}
        z, wc = w(m, n), w(m, k + n)
        yield "concat", (lambda x, z, wc=wc: _weighted(ops.concat([x, z], axis=1), wc)), {"x": x, "z": z}
        j = int(g.integers(k))
        ws = w(m)
        yield "slice", (lambda x, ws=ws, j=j: _weighted(ops.slice(x, (slice(None), j)), ws)), {"x": x}
        ids = g.integers(m, size=n)
        wr = w(n, k)
        yield "take_rows", (lambda x, ids=ids, wr=wr: _weighted(ops.take_rows(x, ids), wr)), {"x": x}
        logits = w(m, n + 1)
        wsm = w(m, n + 1)
        yield "softmax", (lambda logits, wsm=wsm: _weighted(ops.softmax(logits), wsm)), {"logits": logits}


def run_primitive_suite(seed: int = 0, per_primitive: int = 20, eps: float = 1e-6) -> dict[str, float]:
    """Worst relative error per primitive."""
    worst: dict[str, float] = {}
    for name, fn, leaves in primitive_cases(seed, per_primitive):
        err = grad_check(fn, leaves, eps)
        worst[name] = max(worst.get(name, 0.0), err)
    return worst
