"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LWB1"                      magic
    u32   version (= 1)
    u64   header byte length
    header: UTF-8 lines "name:dtype:d0xd1x...\\n" (scalars have no dims)
    zero bytes up to the next multiple of 8
    raw little-endian payloads, one per header line, in header order

Entries are sorted by name, names are unique, so saving the same state
always yields the same bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LWB1"
VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8"), "u8": np.dtype("u1")}
_NAMES = {np.dtype(v).newbyteorder("=").str: k for k, v in DTYPES.items()}
META_PREFIX = "meta."


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class DuplicateNameError(CheckpointError):
    pass


class HeaderError(CheckpointError):
    pass


def _dtype_name(arr: np.ndarray) -> str:
    key = arr.dtype.newbyteorder("=").str
    if key not in _NAMES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}; use one of {sorted(DTYPES)}")
    return _NAMES[key]


def _check_name(name: str) -> None:
    if not name or ":" in name or "\n" in name or not name.isprintable():
        raise HeaderError(f"illegal entry name {name!r}")


def _pad(n: int) -> int:
    return -n % 8


def encode(state: Mapping[str, np.ndarray]) -> bytes:
    lines, payloads = [], []
    for name in sorted(state):
        _check_name(name)
        arr = np.asarray(state[name])
        kind = _dtype_name(arr)
        dims = "x".join(str(d) for d in arr.shape)
        lines.append(f"{name}:{kind}:{dims}\n")
        payloads.append(np.ascontiguousarray(arr, dtype=DTYPES[kind]).tobytes())
    header = "".join(lines).encode("utf-8")
    prefix = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header
    return prefix + b"\0" * _pad(len(prefix)) + b"".join(payloads)


def payload_offset(header_length: int) -> int:
    start = len(MAGIC) + 12 + header_length
    return start + _pad(start)


def _parse_header(text: str) -> list[tuple[str, str, tuple[int, ...]]]:
    if text and not text.endswith("\n"):
        raise HeaderError("header does not end with a newline")
    entries, seen = [], set()
    for i, line in enumerate(text.split("\n")[:-1], start=1):
        parts = line.split(":")
        if len(parts) != 3:
            raise HeaderError(f"header line {i} is not 'name:dtype:dims': {line!r}")
        name, kind, dims = parts
        _check_name(name)
        if kind not in DTYPES:
            raise HeaderError(f"header line {i}: unknown dtype {kind!r}")
        try:
            shape = tuple(int(d) for d in dims.split("x")) if dims else ()
        except ValueError:
            raise HeaderError(f"header line {i}: bad dims {dims!r}") from None
        if any(d < 0 for d in shape):
            raise HeaderError(f"header line {i}: negative extent")
        if name in seen:
            raise DuplicateNameError(f"entry {name!r} appears twice")
        seen.add(name)
        entries.append((name, kind, shape))
    names = [e[0] for e in entries]
    if names != sorted(names):
        raise HeaderError("entries are not in lexicographic order")
    return entries


def decode(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 16:
        raise TruncatedError("file ends inside the fixed preamble")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader handles {VERSION}")
    if len(data) < 16 + hlen:
        raise TruncatedError("file ends inside the header")
    try:
        text = data[16 : 16 + hlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise HeaderError(f"header is not UTF-8: {exc}") from None
    entries = _parse_header(text)
    offset = payload_offset(hlen)
    if len(data) < offset:
        raise TruncatedError("file ends inside the header padding")
    if any(data[16 + hlen : offset]):
        raise HeaderError("non-zero header padding")
    state = {}
    for name, kind, shape in entries:
        dt = DTYPES[kind]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(data):
            raise TruncatedError(f"payload of {name!r} is truncated")
        arr = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape)
        state[name] = arr.astype(dt.newbyteorder("="))
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after the last payload")
    return state


def save_checkpoint(state: Mapping[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(encode(state))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def header_entries(path: str | Path) -> list[tuple[str, str, tuple[int, ...]]]:
    """``(name, dtype, shape)`` per entry, without reading payloads into arrays."""
    data = Path(path).read_bytes()
    decode(data)  # validates the whole file
    hlen = struct.unpack("<Q", data[8:16])[0]
    return _parse_header(data[16 : 16 + hlen].decode("utf-8"))


# model state helpers ----------------------------------------------------


def text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def entry_text(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8")


def net_state(net, kind: str) -> dict[str, np.ndarray]:
    """Parameters plus ``meta.config`` (config echo), ``meta.seed`` and ``meta.kind``."""
    state = dict(net.params)
    state[META_PREFIX + "config"] = text_entry(net.cfg.to_text())
    state[META_PREFIX + "seed"] = np.asarray(net.cfg.seed, dtype=np.int64)
    state[META_PREFIX + "kind"] = text_entry(kind)
    return state


def save_net(net, path: str | Path, kind: str) -> None:
    save_checkpoint(net_state(net, kind), path)


def load_net(path: str | Path):
    """Rebuild a :class:`VelocityNet` and return ``(net, kind)``."""
    from .config import parse_config
    from .flowmodel import VelocityNet

    state = load_checkpoint(path)
    missing = [k for k in ("config", "kind") if META_PREFIX + k not in state]
    if missing:
        raise CheckpointError(f"{path}: not a model checkpoint (missing {', '.join('meta.' + k for k in missing)})")
    cfg = parse_config(entry_text(state[META_PREFIX + "config"]), profile=None)
    params = {k: v for k, v in state.items() if not k.startswith(META_PREFIX)}
    return VelocityNet(cfg, params), entry_text(state[META_PREFIX + "kind"])
