"""Oracle metrics, routing analysis, baselines and the ablation runner.

Every triplet carries its exact target ``T(b)``, so quality is measured as
plain pixel error against that oracle. Aggregates are formed per task first
and then averaged across tasks, so frequent tasks do not dominate.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from . import rng
from .analogydata import (
    COMPOSITE_DIM,
    AnalogyTriplet,
    TransformSpec,
    apply_transform,
    gen_content,
    grid,
    sample_triplets,
    stack,
)
from .config import TrainConfig
from .diffcore import ShapeError, Tensor
from .flowmodel import FlowBatch, VelocityNet, draw_times, extract_quadrant, fm_loss, sample

PSNR_CAP = 99.0
SPLITS = ("seen", "unseen_params", "unseen_families")


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"rasters differ in shape: {x.shape} vs {y.shape}")
    return x, y


def edit_mse(b_gen, b_oracle) -> float:
    g, o = _pair(b_gen, b_oracle)
    return float(np.mean((g - o) ** 2))


def psnr(b_gen, b_oracle) -> float:
    """10 log10(1 / mse), capped at 99 dB (also the value for identical rasters)."""
    err = edit_mse(b_gen, b_oracle)
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


def preservation_mse(b_gen, b) -> float:
    return edit_mse(b_gen, b)


def quadrant_consistency(x0_hat, y) -> float:
    """MSE over the TL, TR and BL quadrants, which the context already fixes."""
    x, c = _pair(np.asarray(x0_hat).reshape(-1), np.asarray(y).reshape(-1))
    if x.size != COMPOSITE_DIM:
        raise ShapeError(f"expected composites of {COMPOSITE_DIM} values, got {x.size}")
    total = 0.0
    for q in ("TL", "TR", "BL"):
        total += float(np.sum((extract_quadrant(x, q) - extract_quadrant(c, q)) ** 2))
    return total / (3 * 64)


def entropy(e) -> float:
    """-sum e ln e with 0 ln 0 = 0."""
    p = np.asarray(e, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


# generation -------------------------------------------------------------


def routing_of(triplets: Sequence[AnalogyTriplet]):
    bt = stack(triplets)
    return (bt.a, bt.a_prime, bt.b)


def generate(
    net: VelocityNet,
    triplets: Sequence[AnalogyTriplet],
    steps: int,
    seed: int,
    coefficients=None,
    adapters: bool = True,
) -> np.ndarray:
    """Sampled composites, one row per triplet, in a single batched pass."""
    if not triplets:
        return np.zeros((0, COMPOSITE_DIM))
    bt = stack(triplets)
    out = sample(
        net, bt.y, bt.hints, (bt.a, bt.a_prime, bt.b), steps=steps, seed=seed,
        coefficients=coefficients, adapters=adapters,
    )
    return np.asarray(out, dtype=np.float64)


@dataclass(frozen=True)
class SampleScore:
    spec: TransformSpec
    edit_mse: float
    psnr: float
    preservation_mse: float
    quadrant_consistency: float
    identity_mse: float


def score(triplets: Sequence[AnalogyTriplet], composites: np.ndarray) -> list[SampleScore]:
    out = []
    for tr, x in zip(triplets, composites):
        y = grid(tr.a, tr.a_prime, tr.b, tr.b)
        br = extract_quadrant(x, "BR")
        out.append(
            SampleScore(
                spec=tr.spec,
                edit_mse=edit_mse(br, tr.b_prime_oracle),
                psnr=psnr(br, tr.b_prime_oracle),
                preservation_mse=preservation_mse(br, tr.b),
                quadrant_consistency=quadrant_consistency(x, y),
                identity_mse=edit_mse(tr.b, tr.b_prime_oracle),
            )
        )
    return out


METRICS = ("edit_mse", "psnr", "preservation_mse", "quadrant_consistency", "identity_mse")


def aggregate(scores: Iterable[SampleScore]) -> dict[str, float]:
    """Per-task means first, then the mean over tasks (tasks in sorted order)."""
    per_task = task_means(scores)
    if not per_task:
        return {m: float("nan") for m in METRICS}
    keys = sorted(per_task, key=str)
    return {m: float(np.mean([per_task[k][m] for k in keys])) for m in METRICS}


def task_means(scores: Iterable[SampleScore]) -> dict[TransformSpec, dict[str, float]]:
    groups: dict[TransformSpec, list[SampleScore]] = {}
    for s in scores:
        groups.setdefault(s.spec, []).append(s)
    out = {}
    for spec, items in groups.items():
        # sort before summing so sample order cannot change the floating-point result
        out[spec] = {m: float(np.mean(sorted(getattr(s, m) for s in items))) for m in METRICS}
        out[spec]["n"] = len(items)
    return out


# routing analysis -------------------------------------------------------


@dataclass
class RoutingProfile:
    """Per targeted layer: family-mean coefficients and per-sample entropies."""

    mode: str
    family_means: dict[int, dict[str, np.ndarray]]
    entropies: dict[int, np.ndarray] | None
    task_entropy: dict[TransformSpec, float] | None = None

    def mean_entropy(self) -> float | None:
        if self.entropies is None:
            return None
        return float(np.mean([v.mean() for v in self.entropies.values()]))

    def family_spread(self, layer: int) -> float:
        """Mean pairwise L1 distance between family-mean coefficient vectors."""
        vecs = [self.family_means[layer][f] for f in sorted(self.family_means[layer])]
        dists = [np.abs(u - v).sum() for i, u in enumerate(vecs) for v in vecs[i + 1 :]]
        return float(np.mean(dists)) if dists else 0.0


def routing_profile(net: VelocityNet, triplets: Sequence[AnalogyTriplet]) -> RoutingProfile:
    """Entropy is reported only for softmax routing; tanh coefficients are not a distribution."""
    if not net.attached:
        raise ValueError("the network carries no adapters to profile")
    coeffs = {i: e.data.astype(np.float64) for i, e in net.coefficients(net.bind(), routing_of(triplets)).items()}
    families = [t.spec.family for t in triplets]
    means = {}
    for layer, e in coeffs.items():
        means[layer] = {
            fam: e[[j for j, f in enumerate(families) if f == fam]].mean(axis=0) for fam in sorted(set(families))
        }
    if net.cfg.mode != "softmax":
        return RoutingProfile(net.cfg.mode, means, None, None)
    ents = {layer: np.array([entropy(row) for row in e]) for layer, e in coeffs.items()}
    per_sample = np.mean(np.stack(list(ents.values())), axis=0)
    groups: dict[TransformSpec, list[float]] = {}
    for tr, h in zip(triplets, per_sample):
        groups.setdefault(tr.spec, []).append(float(h))
    task_entropy = {k: float(np.mean(sorted(v))) for k, v in groups.items()}
    return RoutingProfile(net.cfg.mode, means, ents, task_entropy)


# pair sensitivity -------------------------------------------------------


def _check_contrast(spec_a: TransformSpec, spec_b: TransformSpec) -> None:
    if spec_a == spec_b:
        raise ValueError(f"pair sensitivity needs two different specs, got {spec_a} twice")
    if spec_a.hint != spec_b.hint:
        raise ValueError(f"{spec_a} and {spec_b} carry different family hints")


def pair_sensitivity(
    net: VelocityNet,
    a,
    b,
    spec_a: TransformSpec,
    spec_b: TransformSpec,
    steps: int = 32,
    seed: int = 0,
) -> tuple[bool, bool]:
    """Generate ``b'`` from the pair made with ``spec_a`` and again with ``spec_b``.

    Both runs share ``b``, the hint and the noise. Returns, for each run,
    whether the oracle of the TransformSpec that built the provided pair is the closer one.
    """
    wins = pair_win_flags(net, [(a, b)], spec_a, spec_b, steps, seed)
    return bool(wins[0, 0]), bool(wins[0, 1])


def _triplet(spec: TransformSpec, a, b) -> AnalogyTriplet:
    a = np.asarray(a, dtype=np.float64).reshape(8, 8)
    b = np.asarray(b, dtype=np.float64).reshape(8, 8)
    return AnalogyTriplet(a, apply_transform(spec, a), b, apply_transform(spec, b), spec, (-1, -1))


def pair_win_flags(net, contents, spec_a, spec_b, steps=32, seed=0) -> np.ndarray:
    """(trials, 2) booleans: did the provided pair's oracle win, for A then B.

    ``contents`` is a sequence of ``(a, b)`` rasters.
    """
    _check_contrast(spec_a, spec_b)
    trips_a = [_triplet(spec_a, a, b) for a, b in contents]
    trips_b = [_triplet(spec_b, a, b) for a, b in contents]
    n = len(trips_a)
    comps = _generate_shared_noise(net, trips_a + trips_b, steps, rng.derive(seed, "pair-noise"), n)
    outputs = [extract_quadrant(c, "BR") for c in comps]
    return pair_wins(outputs[:n], outputs[n:], [b for _, b in contents], spec_a, spec_b)


def pair_wins(b_gen_a, b_gen_b, bs, spec_a: TransformSpec, spec_b: TransformSpec) -> np.ndarray:
    """(trials, 2) booleans from generated ``b'`` rasters for the A-pair and B-pair runs.

    A run wins when its output is strictly closer to the oracle of the TransformSpec
    that built its reference pair than to the other spec's oracle.
    """
    _check_contrast(spec_a, spec_b)
    flags = np.zeros((len(bs), 2), dtype=bool)
    for i, b in enumerate(bs):
        b = np.asarray(b, dtype=np.float64).reshape(8, 8)
        oracle_a, oracle_b = apply_transform(spec_a, b), apply_transform(spec_b, b)
        flags[i, 0] = edit_mse(b_gen_a[i], oracle_a) < edit_mse(b_gen_a[i], oracle_b)
        flags[i, 1] = edit_mse(b_gen_b[i], oracle_b) < edit_mse(b_gen_b[i], oracle_a)
    return flags


def _generate_shared_noise(net, triplets, steps, seed, n) -> np.ndarray:
    """Like :func:`generate` but rows ``i`` and ``n + i`` start from the same noise."""
    bt = stack(triplets)
    noise = rng.stream(seed, "sample").standard_normal((n, COMPOSITE_DIM))
    z0 = np.concatenate([noise, noise]).astype(net.dtype)

    if steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps!r}")
    bound = net.bind()
    routing = (bt.a, bt.a_prime, bt.b)
    mixed = net.mixed_adapters(bound, routing) if net.attached else None
    z = z0
    dt = net.dtype.type(1.0 / steps)
    for k in range(steps, 0, -1):
        t = np.full(len(triplets), k / steps)
        z = z - dt * net.forward(bound, z, t, bt.y.astype(net.dtype), bt.hints, mixed).data
    return z.astype(np.float64)


def pair_win_rate(
    net: VelocityNet,
    spec_a: TransformSpec,
    spec_b: TransformSpec,
    trials: int = 100,
    steps: int = 32,
    seed: int = 0,
) -> float:
    """Fraction of runs (two per trial) in which the provided pair's oracle wins.

    When the output ignores the pair, both runs of a trial produce the same
    image and exactly one of them wins, so an insensitive model scores 0.5.
    """
    g = rng.stream(seed, "pair-contents")
    seeds = g.integers(0, 2**62, size=(trials, 2))
    contents = [(gen_content(int(sa)), gen_content(int(sb))) for sa, sb in seeds]
    flags = pair_win_flags(net, contents, spec_a, spec_b, steps, seed)
    return float(flags.mean())


# coefficient fitting baseline -------------------------------------------


def fit_coefficients_baseline(
    net: VelocityNet,
    a,
    a_prime,
    hint: int,
    steps: int = 100,
    lr: float = 0.1,
    batch: int = 16,
    seed: int = 0,
) -> dict[int, np.ndarray]:
    """Per-layer coefficients fitted by gradient descent on the flow loss.

    The fitting composite is the self-analogy ``[a, a'; a, a']`` with context
    ``[a, a'; a, a]``: only the pair is known, so ``b := a``. Coefficients start
    uniform; every network parameter stays fixed.
    """
    if not net.attached:
        raise ValueError("the network carries no adapters to fit")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    a = np.asarray(a, dtype=np.float64).reshape(8, 8)
    a_prime = np.asarray(a_prime, dtype=np.float64).reshape(8, 8)
    n = net.cfg.n_basis
    coeffs = {i: np.full(n, 1.0 / n) for i in net.attached}
    x0 = np.tile(grid(a, a_prime, a, a_prime).reshape(1, -1), (batch, 1))
    y = np.tile(grid(a, a_prime, a, a).reshape(1, -1), (batch, 1))
    c = np.full(batch, hint, dtype=np.int64)
    bound = net.bind()
    for step in range(steps):
        g = rng.stream(seed, "fit", step)
        fb = FlowBatch(
            x0=x0.astype(net.dtype),
            x1=g.standard_normal(x0.shape).astype(net.dtype),
            t=draw_times(g, batch, net.cfg.t_density),
            y=y.astype(net.dtype),
            c=c,
        )
        tape = dc.Tape()
        leaves = {i: tape.leaf(coeffs[i].astype(net.dtype), name=f"e{i}") for i in net.attached}
        mixed = net.mixed_adapters(bound, coefficients=leaves)
        loss = fm_loss(net, fb, bound=bound, mixed=mixed)
        grads = dc.backward(loss, tape)
        coeffs = {i: coeffs[i] - lr * grads[f"e{i}"].data.astype(np.float64) for i in net.attached}
    return coeffs


def coefficient_tensors(coeffs: Mapping[int, np.ndarray], dtype) -> dict[int, Tensor]:
    return {i: Tensor(np.asarray(e, dtype=dtype)) for i, e in coeffs.items()}


# reports ----------------------------------------------------------------

REPORT_COLUMNS = (
    "scope",
    "split",
    "task",
    "n",
    "edit_mse",
    "psnr",
    "preservation_mse",
    "quadrant_consistency",
    "identity_mse",
    "routing_entropy",
    "pair_win_rate",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return format(v, ".9g")
    return str(v)


@dataclass
class EvalReport:
    """Per-task rows, split aggregates, routing profile and pair sensitivity."""

    tasks: dict[str, dict[TransformSpec, dict[str, float]]]
    splits: dict[str, dict[str, float]]
    routing: RoutingProfile | None
    pair_win_rate: float | None
    overall: dict[str, float] = field(default_factory=dict)

    def rows(self) -> list[dict[str, object]]:
        out = []
        task_h = self.routing.task_entropy if self.routing and self.routing.task_entropy else {}
        for split in self.tasks:
            for spec in sorted(self.tasks[split], key=str):
                m = self.tasks[split][spec]
                out.append(
                    {"scope": "task", "split": split, "task": str(spec), "n": m["n"], **{k: m[k] for k in METRICS},
                     "routing_entropy": task_h.get(spec)}
                )
            agg = self.splits[split]
            hs = [task_h[s] for s in sorted(self.tasks[split], key=str) if s in task_h]
            out.append(
                {"scope": "split", "split": split, "task": "", "n": int(sum(m["n"] for m in self.tasks[split].values())),
                 **{k: agg[k] for k in METRICS}, "routing_entropy": float(np.mean(hs)) if hs else None}
            )
        if self.overall:
            hs = [h for _, h in sorted(task_h.items(), key=lambda kv: str(kv[0]))]
            out.append(
                {"scope": "overall", "split": "all", "task": "",
                 "n": int(sum(m["n"] for t in self.tasks.values() for m in t.values())),
                 **{k: self.overall[k] for k in METRICS}, "routing_entropy": float(np.mean(hs)) if hs else None,
                 "pair_win_rate": self.pair_win_rate}
            )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in self.rows():
            w.writerow([_fmt(row.get(c)) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def routing_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.routing is None:
            w.writerow(["layer", "family"])
            return buf.getvalue()
        layers = sorted(self.routing.family_means)
        n = len(next(iter(self.routing.family_means[layers[0]].values())))
        w.writerow(["layer", "family"] + [f"e{i}" for i in range(n)])
        for layer in layers:
            for fam, vec in sorted(self.routing.family_means[layer].items()):
                w.writerow([layer, fam] + [_fmt(float(v)) for v in vec])
        return buf.getvalue()


def eval_triplets(cfg: TrainConfig, split: str, per_task: int, seed: int | None = None) -> list[AnalogyTriplet]:
    """Fresh evaluation content, drawn from a stream disjoint from training."""
    seed = cfg.seed if seed is None else seed
    specs = cfg.split().tasks(split)
    out = []
    for spec in specs:
        out.extend(sample_triplets([spec], per_task, seed, "eval", str(spec)))
    return out


def evaluate(
    net: VelocityNet,
    split: str = "all",
    per_task: int = 16,
    steps: int | None = None,
    seed: int | None = None,
    pair_trials: int = 100,
) -> EvalReport:
    cfg = net.cfg
    seed = cfg.seed if seed is None else seed
    steps = cfg.sample_steps if steps is None else steps
    task_split = cfg.split()
    names = SPLITS if split == "all" else (split,)
    tasks, splits, everything, all_scores = {}, {}, [], []
    for name in names:
        trips = eval_triplets(cfg, name, per_task, seed)
        if not trips:
            continue
        comps = generate(net, trips, steps, rng.derive(seed, "eval-noise", name))
        scores = score(trips, comps)
        tasks[name] = task_means(scores)
        splits[name] = aggregate(scores)
        everything.extend(trips)
        all_scores.extend(scores)
    routing = None
    if net.attached and everything:
        routing = routing_profile(net, everything)
    win = None
    if pair_trials and "brightness" in {s.family for s in task_split.seen}:
        win = pair_win_rate(
            net, TransformSpec("brightness", 0.2), TransformSpec("brightness", 0.4), pair_trials, steps, seed
        )
    return EvalReport(tasks=tasks, splits=splits, routing=routing, pair_win_rate=win, overall=aggregate(all_scores))


# ablation ---------------------------------------------------------------

ABLATION_COLUMNS = (
    ("name", "n_basis", "rank", "mode", "layout", "adapter_params", "final_loss")
    + tuple(f"{s}_{m}" for s in SPLITS for m in ("edit_mse", "psnr", "preservation_mse", "quadrant_consistency"))
    + ("routing_entropy", "pair_win_rate")
)

_SHARED_FIELDS = (
    "hidden_width", "hidden_layers", "time_embed_dim", "hint_dim", "parameterization", "t_density", "t_floor",
    "phase1_steps", "phase1_lr", "phase1_weight_decay", "phase1_mask_prob", "phase2_steps", "batch_size",
    "encoder_hidden", "encoder_features", "targets", "sample_steps",
)


@dataclass
class AblationTable:
    rows: list[dict[str, object]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row.get(c)) for c in ABLATION_COLUMNS])
        return buf.getvalue()

    def generalization_gap(self) -> float | None:
        """unseen-family edit MSE of the single adapter minus that of the basis.

        Positive means the basis generalises better. Reported, never asserted.
        """
        single = [r for r in self.rows if r["n_basis"] == 1]
        basis = [r for r in self.rows if r["n_basis"] > 1 and r["mode"] == "softmax" and r["layout"] == "separate_concat"]
        for s in single:
            for b in basis:
                if b["n_basis"] * b["rank"] == s["rank"]:
                    return float(s["unseen_families_edit_mse"]) - float(b["unseen_families_edit_mse"])
        return None


def check_grid(grid_cfgs: Sequence[tuple[str, TrainConfig]]) -> None:
    """Configs may differ in the adapter axes only; corpus and base must match."""
    if not grid_cfgs:
        raise ValueError("empty ablation grid")
    first_name, first = grid_cfgs[0]
    for name, cfg in grid_cfgs[1:]:
        if cfg.corpus_key() != first.corpus_key():
            raise ValueError(f"ablation entries {first_name!r} and {name!r} use different corpora")
        for f in _SHARED_FIELDS:
            if getattr(cfg, f) != getattr(first, f):
                raise ValueError(f"ablation entries {first_name!r} and {name!r} differ in {f}")


def matched_capacity_pairs(rows: Sequence[Mapping[str, object]]) -> list[tuple[str, str]]:
    """(basis, single) row names whose N*r agree; their adapter counts must be equal."""
    pairs = []
    for s in rows:
        if s["n_basis"] != 1:
            continue
        for b in rows:
            if b["n_basis"] > 1 and b["n_basis"] * b["rank"] == s["rank"]:
                if b["adapter_params"] != s["adapter_params"]:
                    raise AssertionError(
                        f"matched capacity broken: {b['name']} has {b['adapter_params']} adapter parameters, "
                        f"{s['name']} has {s['adapter_params']}"
                    )
                pairs.append((str(b["name"]), str(s["name"])))
    return pairs


def ablate(
    grid_cfgs: Sequence[tuple[str, TrainConfig]],
    per_task: int = 8,
    pair_trials: int = 100,
    progress=None,
) -> AblationTable:
    """Train every entry from one shared base and corpus; one row per entry."""
    from .trainer import train_phase1, train_phase2

    check_grid(grid_cfgs)
    base = train_phase1(grid_cfgs[0][1], progress=progress).net
    rows = []
    for name, cfg in grid_cfgs:
        result = train_phase2(cfg, base, progress=progress)
        net = result.net
        report = evaluate(net, "all", per_task=per_task, pair_trials=pair_trials)
        row: dict[str, object] = {
            "name": name,
            "n_basis": cfg.n_basis,
            "rank": cfg.rank,
            "mode": cfg.mode,
            "layout": cfg.layout,
            "adapter_params": sum(net.adapter_parameter_count(i) for i in net.attached),
            "final_loss": result.final_loss,
            "routing_entropy": report.routing.mean_entropy() if report.routing else None,
            "pair_win_rate": report.pair_win_rate,
        }
        for s in SPLITS:
            agg = report.splits.get(s)
            for m in ("edit_mse", "psnr", "preservation_mse", "quadrant_consistency"):
                row[f"{s}_{m}"] = agg[m] if agg else None
        rows.append(row)
    matched_capacity_pairs(rows)
    return AblationTable(rows)
