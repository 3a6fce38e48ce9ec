"""The f64 gradient suite: every primitive plus two composed paths.

The composed cases are the full flow loss of a tiny velocity network (every
parameter a leaf) and routing followed by mixing and the adapted forward.
"""

from __future__ import annotations

import time

import numpy as np

from . import diffcore as dc
from .analogydata import COMPOSITE_DIM, FAMILIES
from .config import TrainConfig
from .diffcore import run_primitive_suite
from .diffcore.gradcheck import grad_check
from .flowmodel import FlowBatch, VelocityNet, fm_loss
from .lorabasis import LoraBasis, forward_adapted, mix, route

TOLERANCE = 1e-4


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        n_basis=3, rank=2, key_dim=4, hidden_width=5, hidden_layers=2, targets=(0, 1),
        time_embed_dim=4, hint_dim=3, encoder_hidden=6, encoder_features=3,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _away_from_zero(g: np.random.Generator, shape, lo=0.3, hi=1.0) -> np.ndarray:
    return g.choice([-1.0, 1.0], size=shape) * g.uniform(lo, hi, size=shape)


def velocity_loss_case(seed: int = 0, cfg: TrainConfig | None = None):
    """``(fn, leaves)`` for the flow loss of a tiny adapted network in f64.

    ``B`` factors are drawn non-zero so every adapter parameter gets a gradient.
    """
    cfg = cfg or tiny_config()
    g = np.random.default_rng(seed)
    net = VelocityNet.create(cfg, seed, dtype=np.float64).attach_adapters(seed)
    updates = {}
    for i in net.attached:
        name = f"lora.layer{i}.B"
        updates[name] = g.normal(0.0, 0.5, size=net.params[name].shape)
        bias = f"lora.layer{i}.proj.bias"
        if bias in net.params:
            updates[bias] = g.normal(0.0, 0.5, size=net.params[bias].shape)
    for i in range(len(net.layer_dims) - 1):
        name = f"base.layer{i}.bias"
        updates[name] = g.normal(0.0, 0.1, size=net.params[name].shape)
    net = net.with_params(updates)
    rows = 2
    batch = FlowBatch(
        x0=g.uniform(0.2, 0.8, size=(rows, COMPOSITE_DIM)),
        x1=_away_from_zero(g, (rows, COMPOSITE_DIM)),
        t=np.array([0.35, 0.8]),
        y=g.uniform(0.2, 0.8, size=(rows, COMPOSITE_DIM)),
        c=np.array([1, len(FAMILIES) - 1]),
        routing=tuple(g.uniform(0.1, 0.9, size=(rows, 64)) for _ in range(3)),
    )
    names = sorted(k for k in net.params if not k.startswith("encoder."))

    def fn(**leaves):
        bound = dict(net.bind())
        bound.update(leaves)
        return fm_loss(net, batch, bound=bound)

    return fn, {k: np.array(net.params[k], dtype=np.float64) for k in names}


def routing_mix_case(seed: int = 0, mode: str = "softmax"):
    g = np.random.default_rng(seed)
    n, r, m, k, d, rows = 3, 2, 4, 5, 3, 2
    x = _away_from_zero(g, (rows, k))
    W0 = g.normal(size=(m, k))
    w = g.normal(size=(rows, m))

    def fn(q, keys, A, B):
        basis = LoraBasis(A=A, B=B, keys=keys, alpha=float(r))
        e = route(q, keys, mode)
        out = forward_adapted(x, W0, mix(basis, e))
        return dc.sum(dc.mul(out, w))

    leaves = {
        "q": g.normal(size=(rows, d)),
        "keys": g.normal(size=(n, d)),
        "A": g.normal(size=(n, r, k)),
        "B": g.normal(size=(n, m, r)),
    }
    return fn, leaves


def run_suite(seed: int = 0, per_primitive: int = 20, eps: float = 1e-6, composed_eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error per primitive and per composed case.

    The composed losses sum thousands of terms, so their rounding noise is
    larger; a step of 1e-5 keeps it well below the truncation error.
    """
    worst = run_primitive_suite(seed, per_primitive, eps)
    fn, leaves = velocity_loss_case(seed)
    worst["velocity_loss"] = grad_check(fn, leaves, composed_eps)
    for mode in ("softmax", "tanh"):
        fn, leaves = routing_mix_case(seed, mode)
        worst[f"routing_mix_{mode}"] = grad_check(fn, leaves, composed_eps)
    return worst


def main_report(seed: int = 0) -> tuple[bool, str]:
    start = time.perf_counter()
    worst = run_suite(seed)
    lines = [f"{name:22s} {err:.3e}" for name, err in sorted(worst.items())]
    overall = max(worst.values())
    ok = overall < TOLERANCE
    lines.append(f"worst relative error {overall:.3e} ({'ok' if ok else 'FAIL'}, tolerance {TOLERANCE:g})")
    lines.append(f"elapsed {time.perf_counter() - start:.1f}s")
    return ok, "\n".join(lines)
