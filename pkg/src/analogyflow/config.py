"""Training configuration and its text grammar.

The grammar is line based::

    # comment
    [section]              # optional, purely organisational
    key = value            # integer, float, "string", true/false, [list]

Keys form one flat namespace; unknown keys, type mismatches and
inconsistent splits are reported with the offending line number.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

from . import analogydata as data

PROFILES: dict[str, dict[str, Any]] = {
    "desk": {"n_basis": 8, "rank": 2, "key_dim": 16, "batch_size": 16},
    "paper": {"n_basis": 32, "rank": 4, "key_dim": 128, "batch_size": 16},
}

PARAMETERIZATIONS = ("context_residual", "velocity")
T_DENSITIES = ("uniform", "quadratic")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class TrainConfig:
    profile: str = "desk"
    # adapter basis and routing
    n_basis: int = 8
    rank: int = 2
    key_dim: int = 16
    alpha: float | None = None
    temperature: float | None = None
    mode: str = "softmax"
    layout: str = "separate_concat"
    targets: tuple[int, ...] = (0, 1, 2)
    proj_bias: bool = True
    # velocity network
    hidden_width: int = 256
    hidden_layers: int = 3
    time_embed_dim: int = 16
    hint_dim: int = 8
    parameterization: str = "context_residual"
    t_density: str = "quadratic"
    t_floor: float = 0.01
    # frozen encoder
    encoder_hidden: int = 64
    encoder_features: int = 32
    # tasks
    families: tuple[str, ...] = ()
    seen: tuple[str, ...] = data.DEFAULT_SEEN
    unseen_params: tuple[str, ...] = data.DEFAULT_UNSEEN_PARAMS
    unseen_families: tuple[str, ...] = data.DEFAULT_UNSEEN_FAMILIES
    # phase 1 (base network)
    phase1_steps: int = 2000
    phase1_lr: float = 1e-3
    phase1_weight_decay: float = 0.0
    phase1_mask_prob: float = 1.0
    # phase 2 (adapter basis)
    phase2_steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.05
    eps: float = 1e-8
    grad_clip: float = 0.0
    seed: int = 0
    sample_steps: int = 32
    log_every: int = 50
    eval_every: int = 500
    eval_samples: int = 32

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        from .lorabasis import LAYOUTS, MODES

        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.layout not in LAYOUTS:
            raise ConfigError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ConfigError(f"parameterization must be one of {PARAMETERIZATIONS}")
        if self.t_density not in T_DENSITIES:
            raise ConfigError(f"t_density must be one of {T_DENSITIES}")
        for name in ("n_basis", "rank", "key_dim", "hidden_width", "hidden_layers", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.sample_steps < 1:
            raise ConfigError("sample_steps must be at least 1")
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if not 0.0 <= self.phase1_mask_prob <= 1.0:
            raise ConfigError("phase1_mask_prob must lie in [0, 1]")
        if self.rank > min(self.hidden_width, self.in_dim):
            raise ConfigError(f"rank {self.rank} exceeds the adapted layer widths")
        self.split()

    @property
    def effective_alpha(self) -> float:
        return float(self.rank) if self.alpha is None else float(self.alpha)

    @property
    def effective_temperature(self) -> float:
        return math.sqrt(self.key_dim) if self.temperature is None else float(self.temperature)

    @property
    def matched_single_rank(self) -> int:
        """Rank of the single adapter with the same parameter count as the basis."""
        return self.n_basis * self.rank

    @property
    def in_dim(self) -> int:
        return 2 * data.COMPOSITE_DIM + self.time_embed_dim + self.hint_dim

    def split(self) -> data.TaskSplit:
        try:
            return data.split_tasks(
                self.seen, self.unseen_params, self.unseen_families, families=self.families or None
            )
        except (data.SplitError, data.TransformError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def corpus_key(self) -> tuple:
        """Fields that define the training and evaluation corpus."""
        return (self.families, self.seen, self.unseen_params, self.unseen_families, self.seed)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            lines.append(f"{f.name} = {format_value(value)}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        return text if ("." in text or "e" in text or "inf" in text or "nan" in text) else text + ".0"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    raise TypeError(f"cannot format {value!r}")


_KEY_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")
_SECTION_RE = re.compile(r"^\[\s*([^\]]+?)\s*\]$")
_INT_RE = re.compile(r"^[+-]?\d+$")
_FLOAT_RE = re.compile(r"^[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?$")


def _strip_comment(line: str) -> str:
    quoted = False
    escaped = False
    for i, ch in enumerate(line):
        if escaped:
            escaped = False
        elif ch == "\\" and quoted:
            escaped = True
        elif ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return line[:i]
    return line


def _split_list(body: str, lineno: int) -> list[str]:
    items, buf, quoted, escaped = [], [], False, False
    for ch in body:
        if escaped:
            buf.append(ch)
            escaped = False
        elif ch == "\\" and quoted:
            buf.append(ch)
            escaped = True
        elif ch == '"':
            quoted = not quoted
            buf.append(ch)
        elif ch == "," and not quoted:
            items.append("".join(buf).strip())
            buf = []
        else:
            buf.append(ch)
    if quoted:
        raise ConfigError("unterminated string in list", lineno)
    tail = "".join(buf).strip()
    if tail or items:
        items.append(tail)
    if any(not item for item in items):
        raise ConfigError("empty list element", lineno)
    return items


def parse_value(text: str, lineno: int | None = None) -> Any:
    text = text.strip()
    if not text:
        raise ConfigError("missing value", lineno)
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError("unterminated list", lineno)
        return [parse_value(item, lineno) for item in _split_list(text[1:-1], lineno)]
    if text.startswith('"'):
        if len(text) < 2 or not text.endswith('"'):
            raise ConfigError("unterminated string", lineno)
        body = text[1:-1]
        out, i = [], 0
        while i < len(body):
            ch = body[i]
            if ch == "\\" and i + 1 < len(body):
                out.append(body[i + 1])
                i += 2
                continue
            if ch == '"':
                raise ConfigError("stray quote inside string", lineno)
            out.append(ch)
            i += 1
        return "".join(out)
    if text in ("true", "false"):
        return text == "true"
    if _INT_RE.match(text):
        return int(text)
    if _FLOAT_RE.match(text):
        return float(text)
    raise ConfigError(f"cannot parse value {text!r}", lineno)


def _coerce(name: str, value: Any, lineno: int) -> Any:
    spec = {f.name: f for f in fields(TrainConfig)}[name]
    kind = str(spec.type)

    def bad(expected: str):
        return ConfigError(f"{name} expects {expected}, got {format_value(value)}", lineno)

    if kind.startswith("tuple[int"):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise bad("a list of integers")
        return tuple(value)
    if kind.startswith("tuple[float"):
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise bad("a list of numbers")
        return tuple(float(v) for v in value)
    if kind.startswith("tuple[str"):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise bad("a list of strings")
        return tuple(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise bad("true or false")
        return value
    if kind == "int":
        if not isinstance(value, int) or isinstance(value, bool):
            raise bad("an integer")
        return value
    if kind.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise bad("a string")
        return value
    raise bad(kind)


_CONFIG_KEYS = {f.name for f in fields(TrainConfig)}
_SPLIT_KEYS = ("families", "seen", "unseen_params", "unseen_families")


def parse_sections(text: str) -> list[tuple[str | None, dict[str, tuple[Any, int]]]]:
    """Raw ``(section, {key: (value, line)})`` blocks in file order."""
    blocks: list[tuple[str | None, dict[str, tuple[Any, int]]]] = [(None, {})]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            blocks.append((m.group(1), {}))
            continue
        m = _KEY_RE.match(line)
        if not m:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = m.group(1), parse_value(m.group(2), lineno)
        entries = blocks[-1][1]
        if key in entries:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        entries[key] = (value, lineno)
    return blocks


def build_config(
    entries: dict[str, tuple[Any, int]], profile: str | None = None, base: TrainConfig | None = None
) -> TrainConfig:
    for key, (_, lineno) in entries.items():
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
    if "profile" in entries:
        value, lineno = entries["profile"]
        if not isinstance(value, str) or value not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}", lineno)
        profile = value
    start = base if base is not None else TrainConfig()
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        start = replace(start, profile=profile, **PROFILES[profile])
    values = {k: _coerce(k, v, ln) for k, (v, ln) in entries.items() if k != "profile"}
    # split keys are only consistent as a group, so they are applied together
    split_values = {k: v for k, v in values.items() if k in _SPLIT_KEYS}
    for key, value in values.items():
        if key in split_values:
            continue
        try:
            start = replace(start, **{key: value})
        except ConfigError as exc:
            raise ConfigError(exc.args[0], entries[key][1]) from None
    try:
        start = replace(start, **split_values)
    except ConfigError as exc:
        raise ConfigError(exc.args[0], max(entries[k][1] for k in split_values)) from None
    return start


def parse_config(text: str, profile: str | None = "desk") -> TrainConfig:
    """Parse a config file over the named profile (a ``profile`` key wins)."""
    blocks = parse_sections(text)
    merged: dict[str, tuple[Any, int]] = {}
    for _, entries in blocks:
        for key, item in entries.items():
            if key in merged:
                raise ConfigError(f"duplicate key {key!r}", item[1])
            merged[key] = item
    return build_config(merged, profile=profile)


def parse_grid(text: str, profile: str | None = "desk") -> list[tuple[str, TrainConfig]]:
    """Keys before the first section are shared; each section names one config."""
    blocks = parse_sections(text)
    common = blocks[0][1]
    runs = []
    names = set()
    for name, entries in blocks[1:]:
        if name in names:
            raise ConfigError(f"duplicate grid entry [{name}]")
        names.add(name)
        runs.append((name, build_config({**common, **entries}, profile=profile)))
    if not runs:
        raise ConfigError("grid defines no configurations")
    return runs
