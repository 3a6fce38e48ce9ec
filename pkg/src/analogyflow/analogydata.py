"""Procedural analogy triplets on 8x8 rasters and their 2x2 composites."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng

SIDE = 8
PIXELS = SIDE * SIDE
COMPOSITE_SIDE = 2 * SIDE
COMPOSITE_DIM = COMPOSITE_SIDE * COMPOSITE_SIDE

FAMILIES = (
    "box_blur3",
    "brightness",
    "contrast",
    "hflip",
    "invert",
    "roll_right",
    "transpose",
    "vflip",
)
# hint ids follow lexicographic family order
HINT_IDS = {name: i for i, name in enumerate(FAMILIES)}
PARAMETRIC = {"roll_right", "brightness", "contrast"}

QUADRANTS = ("TL", "TR", "BL", "BR")


class TransformError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class TransformSpec:
    family: str
    param: float | None = None

    def __post_init__(self) -> None:
        if self.family not in HINT_IDS:
            raise TransformError(f"unknown transform family {self.family!r}")
        if self.family in PARAMETRIC:
            if self.param is None:
                raise TransformError(f"{self.family} needs a parameter")
            if self.family == "roll_right" and int(self.param) not in (1, 2, 3):
                raise TransformError(f"roll_right shift must be 1, 2 or 3, got {self.param}")
            if self.family == "brightness" and not -0.5 <= self.param <= 0.5:
                raise TransformError(f"brightness delta {self.param} outside [-0.5, 0.5]")
            if self.family == "contrast" and not 0.5 <= self.param <= 2.0:
                raise TransformError(f"contrast gain {self.param} outside [0.5, 2.0]")
        elif self.param is not None:
            raise TransformError(f"{self.family} takes no parameter")

    @property
    def hint(self) -> int:
        return HINT_IDS[self.family]

    def __str__(self) -> str:
        if self.param is None:
            return self.family
        if self.family == "roll_right":
            return f"roll_right:{int(self.param)}"
        return f"{self.family}:{self.param:g}"

    @classmethod
    def parse(cls, text: str) -> "TransformSpec":
        family, _, param = text.strip().partition(":")
        if not param:
            return cls(family)
        value = float(param)
        return cls(family, int(value) if family == "roll_right" else value)


IDENTITY = TransformSpec("brightness", 0.0)


def gen_content(seed: int) -> np.ndarray:
    """Deterministic 8x8 content raster in [0, 1]."""
    g = rng.stream(seed, "content")
    yy, xx = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64)
    kind = g.integers(3)
    if kind == 0:
        img = np.zeros((SIDE, SIDE))
        for _ in range(int(g.integers(1, 4))):
            cy, cx = g.uniform(-0.5, SIDE - 0.5, size=2)
            sigma = g.uniform(1.0, 2.5)
            amp = g.uniform(0.5, 1.0)
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    elif kind == 1:
        coord = xx if g.integers(2) == 0 else yy
        period = g.uniform(2.5, 6.0)
        phase = g.uniform(0, 2 * math.pi)
        img = np.sin(2 * math.pi * coord / period + phase)
    else:
        angle = g.uniform(0, 2 * math.pi)
        img = math.cos(angle) * xx + math.sin(angle) * yy
    lo = g.uniform(0.0, 0.1)
    hi = g.uniform(0.9, 1.0)
    span = img.max() - img.min()
    if span < 1e-12:
        return np.full((SIDE, SIDE), 0.5)
    return lo + (hi - lo) * (img - img.min()) / span


def apply_transform(spec: TransformSpec, raster: np.ndarray) -> np.ndarray:
    x = np.asarray(raster, dtype=np.float64)
    f = spec.family
    if f == "invert":
        return 1.0 - x
    if f == "hflip":
        return x[:, ::-1].copy()
    if f == "vflip":
        return x[::-1, :].copy()
    if f == "transpose":
        return x.T.copy()
    if f == "roll_right":
        return np.roll(x, int(spec.param), axis=1)
    if f == "brightness":
        return np.clip(x + spec.param, 0.0, 1.0)
    if f == "contrast":
        return np.clip(0.5 + spec.param * (x - 0.5), 0.0, 1.0)
    if f == "box_blur3":
        padded = np.pad(x, 1, mode="reflect")
        windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
        return windows.mean(axis=(-2, -1))
    raise TransformError(f"unknown transform family {f!r}")


@dataclass(frozen=True)
class AnalogyTriplet:
    a: np.ndarray
    a_prime: np.ndarray
    b: np.ndarray
    b_prime_oracle: np.ndarray
    spec: TransformSpec
    content_seed: tuple[int, int]


@dataclass(frozen=True)
class CompositeSample:
    y: np.ndarray
    x0: np.ndarray


def make_triplet(spec: TransformSpec, seed_a: int, seed_b: int) -> AnalogyTriplet:
    a = gen_content(seed_a)
    b = gen_content(seed_b)
    return AnalogyTriplet(
        a=a,
        a_prime=apply_transform(spec, a),
        b=b,
        b_prime_oracle=apply_transform(spec, b),
        spec=spec,
        content_seed=(seed_a, seed_b),
    )


def grid(tl: np.ndarray, tr: np.ndarray, bl: np.ndarray, br: np.ndarray) -> np.ndarray:
    return np.block([[tl, tr], [bl, br]])


def split_quadrants(composite: np.ndarray) -> dict[str, np.ndarray]:
    img = np.asarray(composite).reshape(COMPOSITE_SIDE, COMPOSITE_SIDE)
    return {
        "TL": img[:SIDE, :SIDE],
        "TR": img[:SIDE, SIDE:],
        "BL": img[SIDE:, :SIDE],
        "BR": img[SIDE:, SIDE:],
    }


def make_composite(triplet: AnalogyTriplet) -> CompositeSample:
    t = triplet
    return CompositeSample(
        y=grid(t.a, t.a_prime, t.b, t.b),
        x0=grid(t.a, t.a_prime, t.b, t.b_prime_oracle),
    )


@dataclass(frozen=True)
class TaskSplit:
    seen: tuple[TransformSpec, ...]
    unseen_params: tuple[TransformSpec, ...]
    unseen_families: tuple[TransformSpec, ...]

    def __post_init__(self) -> None:
        sets = {
            "seen": set(self.seen),
            "unseen_params": set(self.unseen_params),
            "unseen_families": set(self.unseen_families),
        }
        names = list(sets)
        for i, first in enumerate(names):
            for second in names[i + 1 :]:
                common = sets[first] & sets[second]
                if common:
                    shown = ", ".join(sorted(map(str, common)))
                    raise SplitError(f"{first} and {second} overlap on {shown}")
        seen_fams = {s.family for s in self.seen}
        held_fams = {s.family for s in self.unseen_families}
        if seen_fams & held_fams:
            raise SplitError(
                "held-out families also appear in seen: " + ", ".join(sorted(seen_fams & held_fams))
            )
        for s in self.unseen_params:
            if s.family not in seen_fams:
                raise SplitError(f"unseen parameter {s} belongs to a family that is not seen")

    def tasks(self, name: str) -> tuple[TransformSpec, ...]:
        if name == "all":
            return self.seen + self.unseen_params + self.unseen_families
        if name not in ("seen", "unseen_params", "unseen_families"):
            raise SplitError(f"unknown split {name!r}")
        return getattr(self, name)

    def label(self, spec: TransformSpec) -> str:
        for name in ("seen", "unseen_params", "unseen_families"):
            if spec in getattr(self, name):
                return name
        raise SplitError(f"{spec} is not part of this split")


DEFAULT_SEEN = (
    "invert",
    "hflip",
    "roll_right:1",
    "roll_right:2",
    "brightness:-0.4",
    "brightness:-0.2",
    "brightness:0.2",
    "brightness:0.4",
    "contrast:0.75",
    "contrast:1.5",
)
DEFAULT_UNSEEN_PARAMS = (
    "roll_right:3",
    "brightness:-0.3",
    "brightness:0.3",
    "contrast:0.6",
    "contrast:1.8",
)
DEFAULT_UNSEEN_FAMILIES = ("vflip", "transpose", "box_blur3")


def split_tasks(
    seen: Iterable[str] = DEFAULT_SEEN,
    unseen_params: Iterable[str] = DEFAULT_UNSEEN_PARAMS,
    unseen_families: Iterable[str] = DEFAULT_UNSEEN_FAMILIES,
    families: Sequence[str] | None = None,
) -> TaskSplit:
    """Build a split from spec strings such as ``"roll_right:2"``.

    ``families`` restricts the seen and unseen-parameter cells to the named
    families; held-out families are kept as given.
    """
    def parse(items: Iterable[str]) -> tuple[TransformSpec, ...]:
        return tuple(TransformSpec.parse(s) for s in items)

    seen_specs = parse(seen)
    param_specs = parse(unseen_params)
    if families is not None:
        unknown = set(families) - set(FAMILIES)
        if unknown:
            raise SplitError(f"unknown families: {', '.join(sorted(unknown))}")
        keep = set(families)
        seen_specs = tuple(s for s in seen_specs if s.family in keep)
        param_specs = tuple(s for s in param_specs if s.family in keep)
    return TaskSplit(seen_specs, param_specs, parse(unseen_families))


@dataclass
class Batch:
    """Stacked composites plus the routing triplets, flattened row-wise."""

    y: np.ndarray
    x0: np.ndarray
    a: np.ndarray
    a_prime: np.ndarray
    b: np.ndarray
    hints: np.ndarray
    specs: list[TransformSpec] = field(default_factory=list)


def stack(triplets: Sequence[AnalogyTriplet]) -> Batch:
    comps = [make_composite(t) for t in triplets]
    return Batch(
        y=np.stack([c.y.reshape(-1) for c in comps]),
        x0=np.stack([c.x0.reshape(-1) for c in comps]),
        a=np.stack([t.a.reshape(-1) for t in triplets]),
        a_prime=np.stack([t.a_prime.reshape(-1) for t in triplets]),
        b=np.stack([t.b.reshape(-1) for t in triplets]),
        hints=np.array([t.spec.hint for t in triplets], dtype=np.int64),
        specs=[t.spec for t in triplets],
    )


def sample_triplets(
    specs: Sequence[TransformSpec], count: int, seed: int, *tag: int | str
) -> list[AnalogyTriplet]:
    """``count`` triplets with tasks drawn uniformly from ``specs``."""
    g = rng.stream(seed, "triplets", *tag)
    picks = g.integers(len(specs), size=count)
    contents = g.integers(0, 2**62, size=(count, 2))
    return [make_triplet(specs[i], int(sa), int(sb)) for i, (sa, sb) in zip(picks, contents)]


def to_pgm(raster: np.ndarray) -> bytes:
    """8-bit binary PGM with values rounded half away from zero."""
    img = np.asarray(raster, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D raster, got shape {img.shape}")
    scaled = np.clip(img, 0.0, 1.0) * 255.0
    levels = np.floor(scaled + 0.5).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + levels.tobytes()


def write_pgm(path: str | Path, raster: np.ndarray) -> None:
    Path(path).write_bytes(to_pgm(raster))


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a PGM written by :func:`write_pgm` back into [0, 1] floats."""
    data = Path(path).read_bytes()
    magic, dims, maxval, payload = data.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in dims.split())
    pixels = np.frombuffer(payload[: w * h], dtype=np.uint8)
    return pixels.reshape(h, w).astype(np.float64) / int(maxval)
