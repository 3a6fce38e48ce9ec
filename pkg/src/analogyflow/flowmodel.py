"""Conditional velocity field over 2x2 composites, its flow loss and sampler.

The network is a tanh MLP on ``concat(z_t, time_embed(t), y, hint(c))``.
Hidden layers named in the config carry a basis of routed low-rank
adapters; the routing query comes from the analogy triplet, so the mixed
adapters depend on ``(a, a', b)`` only and are computed once per sample.

Two output parameterisations are supported. ``velocity`` returns the last
layer directly. ``context_residual`` reads the last layer as a correction
``F`` to the context, predicting the clean composite ``y + F``, and returns
the implied velocity ``(z_t - y - F) / max(t, t_floor)``. Both are trained
with the same velocity-matching loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import diffcore as dc
from . import rng
from .analogydata import COMPOSITE_DIM, FAMILIES, PIXELS, QUADRANTS, split_quadrants
from .config import ConfigError, TrainConfig
from .diffcore import ShapeError, Tensor
from .lorabasis import (
    FrozenEncoder,
    LoraBasis,
    LoraModule,
    RouterHead,
    forward_adapted,
    head_input_width,
    init_basis,
    init_head,
    mix,
    query_features,
    route,
)

ENCODER_KEYS = ("b1", "b2", "w1", "w2")
LORA_KEYS = ("A", "B", "keys", "proj.weight", "proj.bias")


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features ``sin(pi 2^k t), cos(pi 2^k t)`` for k < dim/2."""
    if dim % 2:
        raise ValueError(f"time embedding dimension must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    freqs = math.pi * 2.0 ** np.arange(dim // 2)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def check_targets(cfg: TrainConfig) -> None:
    bad = [i for i in cfg.targets if not 0 <= i < cfg.hidden_layers]
    if bad:
        raise ConfigError(
            f"targeted layers {bad} do not exist; hidden layers are 0..{cfg.hidden_layers - 1}"
        )
    if len(set(cfg.targets)) != len(cfg.targets):
        raise ConfigError(f"targeted layers repeat: {list(cfg.targets)}")


class VelocityNet:
    """Parameters plus the forward pass; parameters live in a flat name->array map.

    Names: ``base.layer{i}.weight`` (out x in) and ``.bias``, ``hint.table``,
    ``lora.layer{i}.{A,B,keys,proj.weight,proj.bias}``, ``encoder.{w1,b1,w2,b2}``.
    The encoder is drawn together with the adapters, since its input width
    follows the routing layout; a base-only net has none.
    """

    def __init__(self, cfg: TrainConfig, params: Mapping[str, np.ndarray]):
        self.cfg = cfg
        self.params: dict[str, np.ndarray] = {}
        for name, value in params.items():
            arr = np.array(value, copy=True)
            arr.flags.writeable = False
            self.params[name] = arr
        self._const: dict[str, Tensor] = {}
        self._check()
        self.encoder = (
            FrozenEncoder(*(self.params[f"encoder.{k}"] for k in ("w1", "b1", "w2", "b2")))
            if self.attached
            else None
        )

    # construction -----------------------------------------------------

    @property
    def layer_dims(self) -> list[int]:
        c = self.cfg
        return [c.in_dim] + [c.hidden_width] * c.hidden_layers + [COMPOSITE_DIM]

    @classmethod
    def create(cls, cfg: TrainConfig, seed: int | None = None, dtype=np.float32) -> "VelocityNet":
        """A freshly initialised base network without adapters."""
        seed = cfg.seed if seed is None else seed
        dims = [cfg.in_dim] + [cfg.hidden_width] * cfg.hidden_layers + [COMPOSITE_DIM]
        params: dict[str, np.ndarray] = {}
        for i in range(len(dims) - 1):
            g = rng.stream(seed, "base", i)
            params[f"base.layer{i}.weight"] = g.normal(0.0, 1.0 / math.sqrt(dims[i]), size=(dims[i + 1], dims[i]))
            params[f"base.layer{i}.bias"] = np.zeros(dims[i + 1])
        params["hint.table"] = rng.stream(seed, "hint").normal(size=(len(FAMILIES), cfg.hint_dim))
        return cls(cfg, {k: v.astype(dtype) for k, v in params.items()})

    def attach_adapters(self, seed: int | None = None) -> "VelocityNet":
        """Copy of this net with a freshly initialised basis on every targeted layer."""
        cfg = self.cfg
        check_targets(cfg)
        seed = cfg.seed if seed is None else seed
        dtype = self.dtype
        dims = self.layer_dims
        params = {k: v for k, v in self.params.items() if not k.startswith(("lora.", "encoder."))}
        # the encoder input width depends on the routing layout, so it is drawn here
        raster = PIXELS if cfg.layout == "separate_concat" else COMPOSITE_DIM
        enc = FrozenEncoder.create(
            rng.stream(seed, "encoder", cfg.layout), raster, cfg.encoder_hidden, cfg.encoder_features
        )
        for k, v in enc.state().items():
            params[f"encoder.{k}"] = v
        width = head_input_width(cfg.layout, cfg.encoder_features)
        for i in cfg.targets:
            g = rng.stream(seed, "lora", i)
            basis = init_basis(g, cfg.n_basis, cfg.rank, dims[i + 1], dims[i], cfg.key_dim)
            head = init_head(g, width, cfg.key_dim, bias=cfg.proj_bias)
            for k, v in basis.items():
                params[f"lora.layer{i}.{k}"] = v.astype(dtype)
            for k, v in head.items():
                params[f"lora.layer{i}.proj.{k}"] = v.astype(dtype)
        return VelocityNet(cfg, params)

    def _check(self) -> None:
        dims = self.layer_dims
        p = self.params
        for i in range(len(dims) - 1):
            w, b = p.get(f"base.layer{i}.weight"), p.get(f"base.layer{i}.bias")
            if w is None or b is None:
                raise ShapeError(f"missing base layer {i}")
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ShapeError(f"base layer {i} has shape {w.shape}/{b.shape}, expected {(dims[i + 1], dims[i])}")
        if p.get("hint.table") is None or p["hint.table"].shape != (len(FAMILIES), self.cfg.hint_dim):
            raise ShapeError("hint table missing or misshapen")
        if self.attached:
            for k in ENCODER_KEYS:
                if f"encoder.{k}" not in p:
                    raise ShapeError(f"missing encoder.{k}")
            raster = PIXELS if self.cfg.layout == "separate_concat" else COMPOSITE_DIM
            if p["encoder.w1"].shape[0] != raster:
                raise ShapeError(f"encoder expects rasters of {p['encoder.w1'].shape[0]} values, layout needs {raster}")
        elif any(k.startswith("encoder.") for k in p):
            raise ShapeError("encoder parameters without any adapter")
        for i in self.attached:
            for k in LORA_KEYS:
                if k == "proj.bias" and not self.cfg.proj_bias:
                    continue
                if f"lora.layer{i}.{k}" not in p:
                    raise ShapeError(f"layer {i} adapter is missing {k}")
        known = {f"base.layer{i}.{k}" for i in range(len(dims) - 1) for k in ("weight", "bias")}
        known |= {"hint.table"}
        if self.attached:
            known |= {f"encoder.{k}" for k in ENCODER_KEYS}
        known |= {f"lora.layer{i}.{k}" for i in self.attached for k in LORA_KEYS}
        extra = sorted(set(p) - known)
        if extra:
            raise ShapeError(f"unexpected parameters: {extra}")

    @property
    def attached(self) -> tuple[int, ...]:
        found = sorted({int(k.split(".")[1][5:]) for k in self.params if k.startswith("lora.layer")})
        return tuple(found)

    @property
    def dtype(self):
        return self.params["base.layer0.weight"].dtype

    def astype(self, dtype) -> "VelocityNet":
        return VelocityNet(
            self.cfg, {k: v if k.startswith("encoder.") else v.astype(dtype) for k, v in self.params.items()}
        )

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "VelocityNet":
        unknown = set(updates) - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        return VelocityNet(self.cfg, {**self.params, **updates})

    def without_adapters(self) -> "VelocityNet":
        return VelocityNet(
            self.cfg, {k: v for k, v in self.params.items() if not k.startswith(("lora.", "encoder."))}
        )

    def frozen_names(self) -> list[str]:
        """Base weights and the encoder: never updated once phase 1 is over."""
        return sorted(k for k in self.params if k.startswith(("base.", "encoder.")))

    def lora_names(self) -> list[str]:
        return sorted(k for k in self.params if k.startswith("lora."))

    def trainable_names(self) -> list[str]:
        """The adapter set: bases, keys, projections, plus the hint table."""
        return sorted(self.lora_names() + ["hint.table"])

    def adapter_parameter_count(self, layer: int) -> int:
        return int(self.params[f"lora.layer{layer}.A"].size + self.params[f"lora.layer{layer}.B"].size)

    # forward ------------------------------------------------------------

    def bind(self, tape: dc.Tape | None = None, trainable=()) -> dict[str, Tensor]:
        """Tensors for every parameter; ``trainable`` names become tape leaves."""
        trainable = set(trainable)
        unknown = trainable - set(self.params)
        if unknown:
            raise KeyError(f"unknown trainable parameters {sorted(unknown)}")
        if trainable and tape is None:
            raise ValueError("trainable parameters need a tape")
        bound = {}
        for name, value in self.params.items():
            if name.startswith("encoder."):
                continue
            if name in trainable:
                bound[name] = tape.leaf(value, name=name)
            else:
                if name not in self._const:
                    self._const[name] = Tensor(value, _owned=True)
                bound[name] = self._const[name]
        return bound

    def features(self, routing) -> np.ndarray:
        """Frozen-encoder features for ``(a, a', b)``, in the network dtype."""
        a, ap, b = routing
        return query_features(a, ap, b, self.encoder, self.cfg.layout).astype(self.dtype)

    def coefficients(self, bound: Mapping[str, Tensor], routing) -> dict[int, Tensor]:
        """Routing coefficients per attached layer, (batch, N) or (N,)."""
        feats = Tensor(self.features(routing), _owned=True)
        out = {}
        for i in self.attached:
            pre = f"lora.layer{i}."
            head = RouterHead(bound[pre + "proj.weight"], bound.get(pre + "proj.bias"), self.cfg.mode)
            out[i] = route(head(feats), bound[pre + "keys"], self.cfg.mode, self.cfg.effective_temperature)
        return out

    def mixed_adapters(
        self,
        bound: Mapping[str, Tensor],
        routing=None,
        coefficients: Mapping[int, Tensor] | None = None,
    ) -> dict[int, LoraModule]:
        """One mixed module per attached layer, routed unless coefficients are given."""
        coefficients = dict(coefficients or {})
        missing = [i for i in self.attached if i not in coefficients]
        if missing:
            if routing is None:
                raise ValueError(
                    f"layers {missing} carry adapters, so routing inputs (a, a', b) are required"
                )
            routed = self.coefficients(bound, routing)
            coefficients.update({i: routed[i] for i in missing})
        mixed = {}
        for i in self.attached:
            pre = f"lora.layer{i}."
            basis = LoraBasis(A=bound[pre + "A"], B=bound[pre + "B"], keys=bound[pre + "keys"], alpha=self.cfg.effective_alpha)
            mixed[i] = mix(basis, coefficients[i])
        return mixed

    def forward(
        self,
        bound: Mapping[str, Tensor],
        z,
        t,
        y,
        c,
        mixed: Mapping[int, LoraModule] | None = None,
    ) -> Tensor:
        """Velocity for a batch; ``mixed`` must cover every attached layer (or be None for base only)."""
        z = np.asarray(z, dtype=self.dtype)
        y = np.asarray(y, dtype=self.dtype)
        if z.ndim != 2 or z.shape[1] != COMPOSITE_DIM or y.shape != z.shape:
            raise ShapeError(f"z and y must both be (batch, {COMPOSITE_DIM}), got {z.shape} and {y.shape}")
        rows = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (rows,))
        ids = np.broadcast_to(np.asarray(c, dtype=np.int64).reshape(-1), (rows,))
        if mixed is not None and set(mixed) != set(self.attached):
            raise ValueError(f"mixed adapters for layers {sorted(mixed)}, net has {list(self.attached)}")
        temb = time_embedding(t, self.cfg.time_embed_dim).astype(self.dtype)
        hint = dc.take_rows(bound["hint.table"], ids)
        h = dc.concat([Tensor(z, _owned=True), Tensor(temb, _owned=True), Tensor(y, _owned=True), hint], axis=1)
        last = len(self.layer_dims) - 2
        for i in range(last + 1):
            module = mixed.get(i) if mixed is not None else None
            o = dc.add_row(
                forward_adapted(h, bound[f"base.layer{i}.weight"], module), bound[f"base.layer{i}.bias"]
            )
            h = dc.tanh(o) if i < last else o
        if self.cfg.parameterization == "velocity":
            return h
        inv_t = (1.0 / np.maximum(t, self.cfg.t_floor)).astype(self.dtype)
        return dc.mul(dc.sub(Tensor(z - y, _owned=True), h), Tensor(np.repeat(inv_t[:, None], COMPOSITE_DIM, axis=1), _owned=True))

    def __call__(self, z, t, y, c, routing=None, coefficients=None, adapters: bool = True) -> np.ndarray:
        """Velocity as a plain array; accepts one composite or a batch."""
        return velocity(self, z, t, y, c, routing, coefficients=coefficients, adapters=adapters)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x)
    if arr.shape in ((COMPOSITE_DIM,), (16, 16)):
        return arr.reshape(1, COMPOSITE_DIM), True
    if arr.ndim == 2 and arr.shape[1] == COMPOSITE_DIM:
        return arr, False
    raise ShapeError(f"expected composites of {COMPOSITE_DIM} values, got shape {arr.shape}")


def velocity(net: VelocityNet, z_t, t, y, c, routing_inputs=None, coefficients=None, adapters: bool = True) -> np.ndarray:
    """v(z_t, t, y, c) with routing from ``(a, a', b)``; ``adapters=False`` runs the frozen base."""
    z, single = _as_batch(z_t)
    yb, _ = _as_batch(y)
    bound = net.bind()
    mixed = net.mixed_adapters(bound, routing_inputs, coefficients) if adapters and net.attached else None
    v = net.forward(bound, z, t, yb, c, mixed).data
    return v[0] if single else v


@dataclass(frozen=True)
class FlowBatch:
    """Clean composites ``x0``, noise ``x1``, times ``t``, contexts ``y`` and hint ids ``c``."""

    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    y: np.ndarray
    c: np.ndarray
    routing: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def __post_init__(self) -> None:
        if not self.x0.shape == self.x1.shape == self.y.shape:
            raise ShapeError(f"x0 {self.x0.shape}, x1 {self.x1.shape} and y {self.y.shape} must match")
        if self.t.shape != (self.x0.shape[0],) or self.c.shape != (self.x0.shape[0],):
            raise ShapeError("need one time and one hint per row")
        if np.any(self.t < 0) or np.any(self.t > 1):
            raise ValueError("t must lie in [0, 1]")

    @property
    def z_t(self) -> np.ndarray:
        t = self.t[:, None].astype(self.x0.dtype)
        return (1 - t) * self.x0 + t * self.x1

    @property
    def target(self) -> np.ndarray:
        return self.x1 - self.x0


def draw_times(g: np.random.Generator, n: int, density: str = "uniform") -> np.ndarray:
    """``uniform`` on [0, 1], or ``quadratic`` with density 3t^2 (via u^(1/3))."""
    u = g.random(n)
    if density == "uniform":
        return u
    if density == "quadratic":
        return np.cbrt(u)
    raise ValueError(f"unknown time density {density!r}")


def make_flow_batch(x0, y, c, g: np.random.Generator, routing=None, density: str = "uniform", dtype=np.float32) -> FlowBatch:
    x0 = np.asarray(x0, dtype=dtype)
    n = x0.shape[0]
    x1 = g.standard_normal(x0.shape).astype(dtype)
    t = draw_times(g, n, density)
    return FlowBatch(x0=x0, x1=x1, t=t, y=np.asarray(y, dtype=dtype), c=np.asarray(c, dtype=np.int64), routing=routing)


def fm_loss(net, batch: FlowBatch, bound=None, mixed=None) -> Tensor:
    """Mean over rows and coordinates of ``(v(z_t, t, y, c) - (x1 - x0))^2``.

    ``net`` is a :class:`VelocityNet` or any callable ``(z, t, y, c, routing)``
    returning velocities.
    """
    if isinstance(net, VelocityNet):
        if bound is None:
            bound = net.bind()
        if mixed is None and net.attached:
            mixed = net.mixed_adapters(bound, batch.routing)
        pred = net.forward(bound, batch.z_t, batch.t, batch.y, batch.c, mixed)
    else:
        pred = net(batch.z_t, batch.t, batch.y, batch.c, batch.routing)
    if not isinstance(pred, Tensor):
        pred = Tensor(np.asarray(pred))
    target = batch.target.astype(pred.dtype)
    return dc.mse(pred, target)


VelocityFn = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray, object], np.ndarray]


def sample(net, y, c, routing_inputs=None, steps: int = 32, seed: int = 0, coefficients=None, adapters: bool = True) -> np.ndarray:
    """Euler integration from seeded noise at t=1 down to t=0.

    ``net`` is a :class:`VelocityNet` or a callable ``(z, t, y, c, routing)``.
    A single composite in gives one out; a batch draws its noise jointly.
    """
    if not isinstance(steps, (int, np.integer)) or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps!r}")
    yb, single = _as_batch(y)
    rows = yb.shape[0]
    ids = np.broadcast_to(np.asarray(c, dtype=np.int64).reshape(-1), (rows,))
    if isinstance(net, VelocityNet):
        dtype = net.dtype
        bound = net.bind()
        mixed = net.mixed_adapters(bound, routing_inputs, coefficients) if adapters and net.attached else None

        def field(z, t):
            return net.forward(bound, z, t, yb, ids, mixed).data
    else:
        dtype = np.result_type(yb.dtype, np.float32)

        def field(z, t):
            return np.asarray(net(z, t, yb, ids, routing_inputs))

    yb = yb.astype(dtype)
    z = rng.stream(seed, "sample").standard_normal(yb.shape).astype(dtype)
    dt = np.dtype(dtype).type(1.0 / steps)
    for k in range(steps, 0, -1):
        t = np.full(rows, k / steps)
        z = z - dt * field(z, t)
    return z[0] if single else z


def extract_quadrant(x0_hat, quadrant: str) -> np.ndarray:
    """The 8x8 block ``TL``, ``TR``, ``BL`` or ``BR`` of a flattened composite."""
    arr = np.asarray(x0_hat)
    if arr.size != COMPOSITE_DIM:
        raise ShapeError(f"expected {COMPOSITE_DIM} values, got {arr.size}")
    if quadrant not in QUADRANTS:
        raise ValueError(f"quadrant must be one of {QUADRANTS}, got {quadrant!r}")
    return split_quadrants(arr)[quadrant].copy()
