"""Two-phase training.

Phase 1 fits the base velocity network on identity analogies, where the
target composite equals the context, so the base learns to reconstruct
whatever it is shown. Phase 2 freezes the base, attaches adapter bases to
the targeted layers and trains only those (plus the hint table) on the seen
analogy tasks with AdamW.

Each step draws its data and noise from its own seeded stream, so a run is
a pure function of ``(config, seed)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import diffcore as dc
from . import rng
from .analogydata import COMPOSITE_SIDE, FAMILIES, IDENTITY, SIDE, sample_triplets, stack
from .config import ConfigError, TrainConfig
from .flowmodel import VelocityNet, check_targets, fm_loss, make_flow_batch

LOG_COLUMNS = ("step", "phase", "loss", "edit_mse", "preservation_mse", "quadrant_mse")


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass
class OptimizerState:
    """First and second moments per parameter plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    config,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One decoupled-weight-decay Adam update with bias correction.

    ``w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w``. Moments are
    kept in f64; updated parameters keep their own dtype. Inputs are not mutated.
    """
    if set(grads) != set(params):
        raise KeyError(f"gradients for {sorted(grads)} but parameters {sorted(params)}")
    b1, b2 = config.betas
    step = state.step + 1
    new_params, m_out, v_out = {}, {}, {}
    for name, w in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(w):
            raise dc.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {np.shape(w)}")
        m = state.m.get(name, np.zeros(g.shape))
        v = state.v.get(name, np.zeros(g.shape))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        w64 = np.asarray(w, dtype=np.float64)
        updated = w64 - config.lr * m_hat / (np.sqrt(v_hat) + config.eps) - config.lr * config.weight_decay * w64
        new_params[name] = updated.astype(np.asarray(w).dtype)
        m_out[name], v_out[name] = m, v
    return new_params, OptimizerState(m=m_out, v=v_out, step=step)


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        return dict(grads)
    total = float(np.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2)) for g in grads.values())))
    if total <= max_norm:
        return dict(grads)
    factor = max_norm / total
    return {k: (np.asarray(g) * factor).astype(np.asarray(g).dtype) for k, g in grads.items()}


@dataclass(frozen=True)
class LogRow:
    step: int
    phase: int
    loss: float
    edit_mse: float | None = None
    preservation_mse: float | None = None
    quadrant_mse: float | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".9g")
    return str(v)


def log_csv(rows, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in LOG_COLUMNS])
    return buf.getvalue()


def read_log_csv(text: str) -> list[LogRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        def opt(key):
            return float(rec[key]) if rec[key] else None

        rows.append(LogRow(int(rec["step"]), int(rec["phase"]), float(rec["loss"]),
                           opt("edit_mse"), opt("preservation_mse"), opt("quadrant_mse")))
    return rows


@dataclass
class TrainResult:
    """The trained net, its log, every per-step loss, and the probe losses.

    The probe is a fixed 128-row flow batch (fixed content, noise and times)
    scored before the first and after the last update; unlike the single
    16-row batch behind the step-0 log row it is a low-variance comparison.
    """

    net: VelocityNet
    log: list[LogRow]
    losses: np.ndarray
    probe_initial: float = float("nan")
    probe_final: float = float("nan")

    @property
    def initial_loss(self) -> float:
        return self.log[0].loss

    @property
    def final_loss(self) -> float:
        return self.log[-1].loss

    def log_csv(self) -> str:
        return log_csv(self.log)


Progress = Callable[[LogRow], None]


def mask_quadrants(y: np.ndarray, g: np.random.Generator, prob: float) -> np.ndarray:
    """With probability ``prob`` per row, grey out one random quadrant of the context."""
    out = y.reshape(-1, 2, SIDE, 2, SIDE).copy()
    hit = g.random(len(y)) < prob
    which = g.integers(4, size=len(y))
    for i in np.flatnonzero(hit):
        out[i, which[i] // 2, :, which[i] % 2, :] = 0.5
    return out.reshape(len(y), COMPOSITE_SIDE * COMPOSITE_SIDE)


def _window_mean(losses: list[float], start: int, stop: int) -> float:
    return float(np.mean(losses[start : stop + 1]))


def _run(
    net: VelocityNet,
    cfg: TrainConfig,
    phase: int,
    steps: int,
    trainable: list[str],
    opt: AdamWConfig,
    make_batch,
    evaluate,
    progress: Progress | None,
    probe=None,
) -> TrainResult:
    """Shared optimisation loop; rows are logged at step 0, every ``log_every`` steps and at the end.

    A logged loss is the mean over the steps since the previous row.
    """
    params = {k: net.params[k] for k in trainable}
    state = OptimizerState()
    losses: list[float] = []
    rows: list[LogRow] = []
    last_logged = -1
    probe_initial = _probe_loss(net, probe)
    for step in range(steps):
        fb = make_batch(step)
        tape = dc.Tape()
        bound = net.bind(tape, trainable)
        loss = fm_loss(net, fb, bound=bound)
        grads = dc.backward(loss, tape)
        losses.append(float(loss.item()))
        g = clip_global_norm({k: grads[k].data for k in trainable}, cfg.grad_clip)
        params, state = adamw_step(params, g, state, opt)
        net = net.with_params(params)
        is_last = step == steps - 1
        if step % cfg.log_every == 0 or is_last:
            metrics = {}
            if evaluate is not None and (step % cfg.eval_every == 0 or is_last):
                metrics = evaluate(net)
            row = LogRow(step, phase, _window_mean(losses, last_logged + 1, step), **metrics)
            rows.append(row)
            last_logged = step
            if progress is not None:
                progress(row)
    return TrainResult(net, rows, np.array(losses), probe_initial, _probe_loss(net, probe))


PROBE_ROWS = 128


def _probe_loss(net: VelocityNet, probe) -> float:
    if probe is None:
        return float("nan")
    return float(fm_loss(net, probe).item())


def _eval_metrics(net: VelocityNet, triplets, steps: int, seed: int) -> dict[str, float]:
    from .evalsuite import aggregate, generate, score

    comps = generate(net, triplets, steps, seed)
    agg = aggregate(score(triplets, comps))
    return {
        "edit_mse": agg["edit_mse"],
        "preservation_mse": agg["preservation_mse"],
        "quadrant_mse": agg["quadrant_consistency"],
    }


def train_phase1(cfg: TrainConfig, progress: Progress | None = None) -> TrainResult:
    """Fit a fresh base on identity analogies with random hints and masked context quadrants."""
    net = VelocityNet.create(cfg, cfg.seed)
    trainable = sorted(net.params)
    opt = AdamWConfig(cfg.phase1_lr, cfg.betas, cfg.eps, cfg.phase1_weight_decay)
    probe = sample_triplets([IDENTITY], cfg.eval_samples, cfg.seed, "phase1-eval")
    eval_seed = rng.derive(cfg.seed, "phase1-eval-noise")

    def make_batch(step):
        trips = sample_triplets([IDENTITY], cfg.batch_size, cfg.seed, "phase1", step)
        bt = stack(trips)
        g = rng.stream(cfg.seed, "phase1-noise", step)
        hints = g.integers(len(FAMILIES), size=cfg.batch_size)
        y = mask_quadrants(bt.y, g, cfg.phase1_mask_prob)
        return make_flow_batch(bt.x0, y, hints, g, None, cfg.t_density, dtype=net.dtype)

    ident = stack(sample_triplets([IDENTITY], PROBE_ROWS, cfg.seed, "phase1-probe"))
    g = rng.stream(cfg.seed, "phase1-probe-noise")
    flow_probe = make_flow_batch(ident.x0, ident.y, ident.hints, g, None, cfg.t_density, dtype=net.dtype)
    return _run(
        net, cfg, 1, cfg.phase1_steps, trainable, opt, make_batch,
        lambda n: _eval_metrics(n, probe, cfg.sample_steps, eval_seed), progress, flow_probe,
    )


def check_base(cfg: TrainConfig, base: VelocityNet) -> VelocityNet:
    """Re-home a base under ``cfg``; architecture fields must agree."""
    check_targets(cfg)
    if base.attached:
        raise ConfigError("phase 2 expects a base network without adapters")
    for name in ("hidden_width", "hidden_layers", "time_embed_dim", "hint_dim", "parameterization"):
        if getattr(cfg, name) != getattr(base.cfg, name):
            raise ConfigError(f"{name} is {getattr(cfg, name)} but the base was built with {getattr(base.cfg, name)}")
    return VelocityNet(cfg, base.params)


def train_phase2(cfg: TrainConfig, base: VelocityNet, progress: Progress | None = None) -> TrainResult:
    """Attach adapters to the frozen base and train the adapter set on the seen tasks."""
    net = check_base(cfg, base).attach_adapters(cfg.seed)
    trainable = net.trainable_names()
    opt = AdamWConfig(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    seen = cfg.split().seen
    if not seen:
        raise ConfigError("the seen split is empty; nothing to train on")
    probe = sample_triplets(seen, cfg.eval_samples, cfg.seed, "phase2-eval")
    eval_seed = rng.derive(cfg.seed, "phase2-eval-noise")

    def make_batch(step):
        trips = sample_triplets(seen, cfg.batch_size, cfg.seed, "phase2", step)
        bt = stack(trips)
        g = rng.stream(cfg.seed, "phase2-noise", step)
        return make_flow_batch(bt.x0, bt.y, bt.hints, g, (bt.a, bt.a_prime, bt.b), cfg.t_density, dtype=net.dtype)

    held = stack(sample_triplets(seen, PROBE_ROWS, cfg.seed, "phase2-probe"))
    g = rng.stream(cfg.seed, "phase2-probe-noise")
    flow_probe = make_flow_batch(
        held.x0, held.y, held.hints, g, (held.a, held.a_prime, held.b), cfg.t_density, dtype=net.dtype
    )
    return _run(
        net, cfg, 2, cfg.phase2_steps, trainable, opt, make_batch,
        lambda n: _eval_metrics(n, probe, cfg.sample_steps, eval_seed), progress, flow_probe,
    )
