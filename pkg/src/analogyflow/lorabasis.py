"""A basis of low-rank adapters mixed per input by key-query routing.

Every adapter pair ``(B_i, A_i)`` owns a key ``k_i``. A frozen encoder turns
the analogy rasters into features; a learnable affine head projects them to
a query ``q``; coefficients ``e = norm(q K^T / temperature)`` weight the
factors, and the mixed pair ``(sum e_i B_i, sum e_i A_i)`` adapts a frozen
weight matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import diffcore as dc
from .analogydata import PIXELS, SIDE, grid
from .diffcore import ShapeError, Tensor

Mode = Literal["softmax", "tanh"]
Layout = Literal["separate_concat", "composite"]
MODES = ("softmax", "tanh")
LAYOUTS = ("separate_concat", "composite")

# pixel standardisation applied before the frozen encoder
PIXEL_MEAN = 0.5
PIXEL_STD = 0.3


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class LoraModule:
    """One adapter pair; ``A``/``B`` may carry a leading batch axis."""

    B: Tensor
    A: Tensor
    alpha: float

    def __post_init__(self) -> None:
        b, a = self.B.shape, self.A.shape
        if len(b) != len(a) or len(b) not in (2, 3):
            raise ShapeError(f"adapter factors must both be 2-D or both 3-D, got {b} and {a}")
        if b[-1] != a[-2] or b[:-2] != a[:-2]:
            raise ShapeError(f"B {b} and A {a} do not compose")
        m, r = b[-2:]
        n = a[-1]
        if r > min(m, n):
            raise ShapeError(f"rank {r} exceeds min({m}, {n})")

    @property
    def rank(self) -> int:
        return self.B.shape[-1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def batched(self) -> bool:
        return len(self.B.shape) == 3

    def delta_w(self) -> np.ndarray:
        """The materialised update ``(alpha / r) B A``."""
        return self.scale * np.matmul(self.B.data, self.A.data)


@dataclass(frozen=True)
class LoraBasis:
    """``N`` adapters stored stacked: ``A`` is (N, r, n), ``B`` is (N, m, r)."""

    A: Tensor
    B: Tensor
    keys: Tensor
    alpha: float

    def __post_init__(self) -> None:
        if len(self.A.shape) != 3 or len(self.B.shape) != 3:
            raise ShapeError("basis factors must be stacked 3-D arrays")
        n_a, r_a, _ = self.A.shape
        n_b, _, r_b = self.B.shape
        if n_a != n_b or r_a != r_b:
            raise ShapeError(f"basis A {self.A.shape} and B {self.B.shape} disagree")
        if self.keys.shape[0] != n_a or len(self.keys.shape) != 2:
            raise ShapeError(f"need one key row per adapter, got keys {self.keys.shape} for N={n_a}")

    @property
    def size(self) -> int:
        return self.A.shape[0]

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def in_dim(self) -> int:
        return self.A.shape[2]

    @property
    def out_dim(self) -> int:
        return self.B.shape[1]

    @property
    def key_dim(self) -> int:
        return self.keys.shape[1]

    def module(self, i: int) -> LoraModule:
        return LoraModule(B=Tensor(self.B.data[i]), A=Tensor(self.A.data[i]), alpha=self.alpha)

    @property
    def modules(self) -> list[LoraModule]:
        return [self.module(i) for i in range(self.size)]

    def adapter_parameter_count(self) -> int:
        return self.size * self.rank * (self.in_dim + self.out_dim)


def init_basis(
    g: np.random.Generator, n_basis: int, rank: int, out_dim: int, in_dim: int, key_dim: int
) -> dict[str, np.ndarray]:
    """Zero ``B`` so the adapted layer starts equal to the frozen one."""
    return {
        "A": g.normal(0.0, 1.0 / math.sqrt(in_dim), size=(n_basis, rank, in_dim)),
        "B": np.zeros((n_basis, out_dim, rank)),
        "keys": g.normal(0.0, 1.0 / math.sqrt(key_dim), size=(n_basis, key_dim)),
    }


class FrozenEncoder:
    """Fixed random two-layer feature map standing in for a pretrained encoder.

    Rasters are standardised with fixed pixel statistics, then passed through
    ``tanh(x W1 + b1) W2 + b2``. Weights are drawn once with variance
    ``1 / fan_in``; biases are zero. Nothing here is ever trained.
    """

    def __init__(self, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray):
        self.w1, self.b1, self.w2, self.b2 = (np.array(v, dtype=np.float64) for v in (w1, b1, w2, b2))
        for v in (self.w1, self.b1, self.w2, self.b2):
            v.flags.writeable = False

    @classmethod
    def create(cls, g: np.random.Generator, raster_dim: int, hidden: int = 64, features: int = 32):
        w1 = g.normal(0.0, 1.0 / math.sqrt(raster_dim), size=(raster_dim, hidden))
        w2 = g.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, features))
        return cls(w1, np.zeros(hidden), w2, np.zeros(features))

    @property
    def raster_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w2.shape[1]

    def state(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def __call__(self, rasters) -> np.ndarray:
        """(raster_dim,) -> (f,) or (batch, raster_dim) -> (batch, f)."""
        x = np.asarray(rasters, dtype=np.float64)
        if x.shape[-1] != self.raster_dim or x.ndim not in (1, 2):
            raise ShapeError(f"encoder expects rasters of width {self.raster_dim}, got {x.shape}")
        h = np.tanh(((x - PIXEL_MEAN) / PIXEL_STD) @ self.w1 + self.b1)
        return h @ self.w2 + self.b2


@dataclass(frozen=True)
class RouterHead:
    """Affine projection from encoder features to a ``key_dim`` query."""

    weight: Tensor
    bias: Tensor | None
    mode: Mode = "softmax"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown routing mode {self.mode!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def key_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, features) -> Tensor:
        f = _t(features)
        single = len(f.shape) == 1
        if single:
            f = dc.reshape(f, (1, -1))
        if f.shape[1] != self.in_dim:
            raise ShapeError(f"router head expects width {self.in_dim}, got {f.shape[1]}")
        q = dc.matmul(f, self.weight)
        if self.bias is not None:
            q = dc.add_row(q, self.bias)
        return dc.reshape(q, (self.key_dim,)) if single else q


def init_head(g: np.random.Generator, in_dim: int, key_dim: int, bias: bool = True) -> dict[str, np.ndarray]:
    params = {"weight": g.normal(0.0, 1.0 / math.sqrt(in_dim), size=(in_dim, key_dim))}
    if bias:
        params["bias"] = np.zeros(key_dim)
    return params


def head_input_width(layout: Layout, feature_dim: int) -> int:
    if layout == "separate_concat":
        return 3 * feature_dim
    if layout == "composite":
        return feature_dim
    raise ValueError(f"unknown encoder layout {layout!r}")


def _flat_rasters(v) -> tuple[np.ndarray, bool]:
    x = np.asarray(v, dtype=np.float64)
    if x.shape == (SIDE, SIDE) or x.shape == (PIXELS,):
        return x.reshape(1, PIXELS), True
    if x.ndim == 3 and x.shape[1:] == (SIDE, SIDE) or x.ndim == 2 and x.shape[1] == PIXELS:
        return x.reshape(-1, PIXELS), False
    raise ShapeError(f"expected {SIDE}x{SIDE} rasters, got shape {x.shape}")


def query_features(a, a_prime, b, encoder: FrozenEncoder, layout: Layout) -> np.ndarray:
    """Encoder features for one triplet or a batch of triplets."""
    (a, single), (a_prime, _), (b, _) = (_flat_rasters(v) for v in (a, a_prime, b))
    if not a.shape == a_prime.shape == b.shape:
        raise ShapeError(f"triplet rasters differ in shape: {a.shape}, {a_prime.shape}, {b.shape}")
    if layout == "separate_concat":
        feats = np.concatenate([encoder(a), encoder(a_prime), encoder(b)], axis=1)
    elif layout == "composite":
        sq = (SIDE, SIDE)
        comps = np.stack(
            [
                grid(ta.reshape(sq), tap.reshape(sq), tb.reshape(sq), tb.reshape(sq)).reshape(-1)
                for ta, tap, tb in zip(a, a_prime, b)
            ]
        )
        feats = encoder(comps)
    else:
        raise ValueError(f"unknown encoder layout {layout!r}")
    return feats[0] if single else feats


def encode_query(a, a_prime, b, encoder: FrozenEncoder, head: RouterHead, layout: Layout) -> Tensor:
    feats = query_features(a, a_prime, b, encoder, layout)
    width = head_input_width(layout, encoder.feature_dim)
    if head.in_dim != width:
        raise ShapeError(f"layout {layout} yields width {width} but the head expects {head.in_dim}")
    return head(Tensor(feats.astype(head.weight.dtype)))


def route(q, keys, mode: Mode = "softmax", temperature: float | None = None) -> Tensor:
    """Coefficients from query-key similarity scaled by ``temperature`` (default sqrt(d))."""
    q, keys = _t(q), _t(keys)
    d = keys.shape[1]
    if q.shape[-1] != d:
        raise ShapeError(f"query dim {q.shape[-1]} does not match key dim {d}")
    single = len(q.shape) == 1
    qm = dc.reshape(q, (1, d)) if single else q
    temp = math.sqrt(d) if temperature is None else float(temperature)
    logits = dc.scale(dc.matmul(qm, dc.transpose(keys)), 1.0 / temp)
    if mode == "softmax":
        e = dc.softmax(logits)
    elif mode == "tanh":
        e = dc.tanh(logits)
    else:
        raise ValueError(f"unknown routing mode {mode!r}")
    return dc.reshape(e, (keys.shape[0],)) if single else e


def mix(basis: LoraBasis, e) -> LoraModule:
    """Linear combination of the basis factors; batched when ``e`` is 2-D."""
    e = _t(e)
    n = basis.size
    if e.shape[-1] != n or len(e.shape) not in (1, 2):
        raise ShapeError(f"need {n} coefficients per row, got shape {e.shape}")
    single = len(e.shape) == 1
    em = dc.reshape(e, (1, n)) if single else e
    rows = em.shape[0]
    r, m, k = basis.rank, basis.out_dim, basis.in_dim
    a_mix = dc.matmul(em, dc.reshape(basis.A, (n, r * k)))
    b_mix = dc.matmul(em, dc.reshape(basis.B, (n, m * r)))
    if single:
        return LoraModule(B=dc.reshape(b_mix, (m, r)), A=dc.reshape(a_mix, (r, k)), alpha=basis.alpha)
    return LoraModule(B=dc.reshape(b_mix, (rows, m, r)), A=dc.reshape(a_mix, (rows, r, k)), alpha=basis.alpha)


def forward_adapted(x, W0, mixed: LoraModule | None) -> Tensor:
    """``W0 x + (alpha/r) B (A x)`` without forming ``B A``.

    ``x`` is (n,) or (batch, n); ``W0`` is (m, n). A batched ``mixed`` module
    supplies one adapter per row of ``x``.
    """
    x, W0 = _t(x), _t(W0)
    single = len(x.shape) == 1
    xm = dc.reshape(x, (1, -1)) if single else x
    if xm.shape[1] != W0.shape[1]:
        raise ShapeError(f"input width {xm.shape[1]} does not match W0 {W0.shape}")
    out = dc.matmul(xm, dc.transpose(W0))
    if mixed is not None:
        if mixed.A.shape[-1] != W0.shape[1] or mixed.B.shape[-2] != W0.shape[0]:
            raise ShapeError(f"adapter {mixed.B.shape}x{mixed.A.shape} does not fit W0 {W0.shape}")
        rows = xm.shape[0]
        if mixed.batched:
            if mixed.A.shape[0] != rows:
                raise ShapeError(f"{mixed.A.shape[0]} adapters for {rows} inputs")
            delta = dc.bmatvec(mixed.B, dc.bmatvec(mixed.A, xm))
        else:
            delta = dc.matmul(dc.matmul(xm, dc.transpose(mixed.A)), dc.transpose(mixed.B))
        out = dc.add(out, dc.scale(delta, mixed.scale))
    return dc.reshape(out, (W0.shape[0],)) if single else out
