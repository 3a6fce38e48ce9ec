"""Command-line entry point: ``analogyflow <subcommand> ...``.

Exit codes: 0 on success, 1 on a usage error (bad flags, missing
arguments), 2 when inputs fail validation (bad config, corrupt checkpoint,
out-of-range values).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .analogydata import (
    COMPOSITE_SIDE, SIDE, AnalogyTriplet, SplitError, TransformError, TransformSpec, grid, read_pgm, write_pgm,
)
from .checkpoint import CheckpointError, header_entries, load_net, save_net
from .config import ConfigError, TrainConfig, parse_config, parse_grid

EXIT_OK, EXIT_USAGE, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; route it through :class:`UsageError` instead."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _load_config(path: str | None, seed: int | None) -> TrainConfig:
    cfg = parse_config(Path(path).read_text(encoding="utf-8")) if path else TrainConfig()
    return cfg if seed is None else cfg.with_overrides(seed=seed)


def _progress(stream):
    def report(row):
        extra = "" if row.edit_mse is None else f" edit_mse={row.edit_mse:.5f}"
        print(f"phase {row.phase} step {row.step:5d} loss={row.loss:.6f}{extra}", file=stream, flush=True)

    return report


def _write_log(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")


def cmd_pretrain(args) -> int:
    from .trainer import train_phase1

    cfg = _load_config(args.config, args.seed)
    result = train_phase1(cfg, progress=None if args.quiet else _progress(sys.stderr))
    save_net(result.net, args.out, "base")
    _write_log(args.log, result.log_csv())
    print(f"wrote base checkpoint {args.out} (final loss {result.final_loss:.6f})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import log_csv, train_phase1, train_phase2

    cfg = _load_config(args.config, args.seed)
    progress = None if args.quiet else _progress(sys.stderr)
    rows = []
    if args.base:
        base, kind = load_net(args.base)
        if kind != "base":
            raise ValidationError(f"{args.base} holds a {kind!r} checkpoint; --base needs a pretrained base")
    else:
        first = train_phase1(cfg, progress=progress)
        base, rows = first.net, list(first.log)
    result = train_phase2(cfg, base, progress=progress)
    save_net(result.net, args.out, "full")
    _write_log(args.log, log_csv(rows + result.log))
    print(f"wrote checkpoint {args.out} (phase 2 loss {result.initial_loss:.6f} -> {result.final_loss:.6f})")
    return EXIT_OK


def _read_hint(directory: Path, override: str | None) -> TransformSpec:
    text = override
    if text is None:
        hint_file = directory / "hint.txt"
        if not hint_file.exists():
            raise ValidationError(f"{directory} has no hint.txt; pass --hint FAMILY")
        text = hint_file.read_text(encoding="utf-8").strip()
    family = text.partition(":")[0]
    try:
        return TransformSpec.parse(text) if ":" in text else TransformSpec(family, _default_param(family))
    except (TransformError, ValueError) as exc:
        raise ValidationError(f"bad hint {text!r}: {exc}") from None


def _default_param(family: str):
    # only the family reaches the model; any legal parameter stands in for it
    return {"roll_right": 1, "brightness": 0.0, "contrast": 1.0}.get(family)


def read_triplet_dir(directory: str | Path, hint: str | None = None) -> AnalogyTriplet:
    """Load ``a.pgm``, ``a_prime.pgm`` and ``b.pgm`` (8x8 each) plus the family hint."""
    d = Path(directory)
    rasters = {}
    for name in ("a", "a_prime", "b"):
        path = d / f"{name}.pgm"
        if not path.exists():
            raise ValidationError(f"triplet directory {d} is missing {path.name}")
        img = read_pgm(path)
        if img.shape != (SIDE, SIDE):
            raise ValidationError(f"{path} is {img.shape[1]}x{img.shape[0]}, expected {SIDE}x{SIDE}")
        rasters[name] = img
    spec = _read_hint(d, hint)
    # no oracle exists for user input; a grey placeholder keeps the record complete
    placeholder = np.full((SIDE, SIDE), 0.5)
    return AnalogyTriplet(spec=spec, b_prime_oracle=placeholder, content_seed=(0, 0), **rasters)


def cmd_sample(args) -> int:
    from .evalsuite import generate

    if args.steps is not None and args.steps < 1:
        raise ValidationError(f"--steps must be a positive integer (got {args.steps})")
    net, kind = load_net(args.checkpoint)
    if kind != "full":
        raise ValidationError(f"{args.checkpoint} is a {kind!r} checkpoint; sampling needs a trained one")
    triplet = read_triplet_dir(args.triplet, args.hint)
    steps = args.steps if args.steps is not None else net.cfg.sample_steps
    seed = net.cfg.seed if args.seed is None else args.seed
    composite = generate(net, [triplet], steps, seed)[0].reshape(COMPOSITE_SIDE, COMPOSITE_SIDE)
    out = Path(args.out)
    write_pgm(out, composite[SIDE:, SIDE:])
    composite_path = Path(args.composite) if args.composite else out.with_name(out.stem + "_composite.pgm")
    write_pgm(composite_path, grid(triplet.a, triplet.a_prime, triplet.b, composite[SIDE:, SIDE:]))
    print(f"wrote {out} and {composite_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalsuite import evaluate

    if args.steps is not None and args.steps < 1:
        raise ValidationError(f"--steps must be a positive integer (got {args.steps})")
    net, kind = load_net(args.checkpoint)
    if kind != "full":
        raise ValidationError(f"{args.checkpoint} is a {kind!r} checkpoint; evaluation needs a trained one")
    report = evaluate(
        net, args.split, per_task=args.per_task, steps=args.steps, seed=args.seed, pair_trials=args.pair_trials
    )
    if args.report:
        Path(args.report).write_text(report.to_csv(), encoding="utf-8")
    else:
        sys.stdout.write(report.to_csv())
    if args.routing:
        Path(args.routing).write_text(report.routing_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evalsuite import ablate

    grid_cfgs = parse_grid(Path(args.grid).read_text(encoding="utf-8"))
    if args.seed is not None:
        grid_cfgs = [(name, cfg.with_overrides(seed=args.seed)) for name, cfg in grid_cfgs]
    table = ablate(grid_cfgs, per_task=args.per_task, pair_trials=args.pair_trials,
                   progress=None if args.quiet else _progress(sys.stderr))
    if args.out:
        Path(args.out).write_text(table.to_csv(), encoding="utf-8")
    else:
        sys.stdout.write(table.to_csv())
    gap = table.generalization_gap()
    if gap is not None:
        print(f"unseen-family edit MSE gap (single minus basis): {gap:+.6f}", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import main_report

    ok, text = main_report(args.seed)
    print(text)
    return EXIT_OK if ok else EXIT_INVALID


def cmd_inspect(args) -> int:
    for name, kind, shape in header_entries(args.checkpoint):
        print(f"{name}\t{kind}\t{'x'.join(map(str, shape)) or 'scalar'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="analogyflow", description="Analogy completion with routed low-rank adapter bases.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def training(q):
        q.add_argument("--config", help="config file (key = value lines)")
        q.add_argument("--seed", type=int, help="override the config seed")
        q.add_argument("--out", required=True, help="checkpoint to write")
        q.add_argument("--log", help="write the training log CSV here")
        q.add_argument("--quiet", action="store_true", help="no per-row progress on stderr")

    q = sub.add_parser("pretrain", help="phase 1: fit the base network")
    training(q)
    q.set_defaults(func=cmd_pretrain)

    q = sub.add_parser("train", help="phase 1 (unless --base is given) then phase 2")
    training(q)
    q.add_argument("--base", help="pretrained base checkpoint; skips phase 1")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("sample", help="complete one analogy from a triplet directory")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--triplet", required=True, help="directory with a.pgm, a_prime.pgm, b.pgm and hint.txt")
    q.add_argument("--hint", help="family hint, overrides hint.txt")
    q.add_argument("--steps", type=int, help="Euler steps (default: from the checkpoint config)")
    q.add_argument("--seed", type=int)
    q.add_argument("--out", required=True, help="PGM for the generated b'")
    q.add_argument("--composite", help="PGM for the full 2x2 composite (default: <out>_composite.pgm)")
    q.set_defaults(func=cmd_sample)

    q = sub.add_parser("eval", help="write the evaluation report CSV")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--split", choices=("seen", "unseen_params", "unseen_families", "all"), default="all")
    q.add_argument("--report", help="CSV path (default: stdout)")
    q.add_argument("--routing", help="also write per-family mean routing coefficients here")
    q.add_argument("--per-task", type=int, default=16)
    q.add_argument("--pair-trials", type=int, default=100)
    q.add_argument("--steps", type=int)
    q.add_argument("--seed", type=int)
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("ablate", help="train and evaluate every entry of a config grid")
    q.add_argument("--grid", required=True, help="grid file: shared keys on top, one [section] per entry")
    q.add_argument("--out", help="CSV path (default: stdout)")
    q.add_argument("--per-task", type=int, default=8)
    q.add_argument("--pair-trials", type=int, default=100)
    q.add_argument("--seed", type=int)
    q.add_argument("--quiet", action="store_true")
    q.set_defaults(func=cmd_ablate)

    q = sub.add_parser("gradcheck", help="run the f64 finite-difference gradient suite")
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_gradcheck)

    q = sub.add_parser("inspect", help="list checkpoint entries")
    q.add_argument("checkpoint")
    q.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ValidationError, ConfigError, CheckpointError, TransformError, SplitError) as exc:
        print(f"analogyflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError) as exc:
        print(f"analogyflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
