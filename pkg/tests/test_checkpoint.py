import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from analogyflow.checkpoint import (
    BadMagicError,
    CheckpointError,
    DuplicateNameError,
    HeaderError,
    TruncatedError,
    VersionMismatchError,
    decode,
    encode,
    entry_text,
    header_entries,
    load_checkpoint,
    load_net,
    payload_offset,
    save_checkpoint,
    save_net,
    text_entry,
)

GOLDEN = "4c574231010000000700000000000000743a6633323a0a000000803f"


def test_golden_scalar_bytes():
    data = encode({"t": np.float32(1.0)})
    assert data.hex() == GOLDEN
    header_length = struct.unpack("<Q", data[8:16])[0]
    assert header_length == len(b"t:f32:\n")
    offset = payload_offset(header_length)
    assert offset == 24 and data[offset:offset + 4] == bytes([0x00, 0x00, 0x80, 0x3F])


def test_header_lines_and_padding():
    data = encode({"w": np.zeros((2, 3), dtype=np.float64), "b": np.arange(3, dtype=np.int64)})
    hlen = struct.unpack("<Q", data[8:16])[0]
    assert data[16:16 + hlen] == b"b:i64:3\nw:f64:2x3\n"
    assert payload_offset(hlen) % 8 == 0
    assert not any(data[16 + hlen:payload_offset(hlen)])


dtypes = st.sampled_from([np.float32, np.float64, np.int64, np.uint8])
names = st.text(alphabet="abcdefghijklmnopqrstuvwxyz._0123456789", min_size=1, max_size=12)


@st.composite
def states(draw):
    keys = draw(st.lists(names, min_size=0, max_size=5, unique=True))
    out = {}
    for k in keys:
        out[k] = draw(arrays(draw(dtypes), array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4)))
    return out


@settings(max_examples=100, deadline=None)
@given(states())
def test_round_trip_is_bit_exact(state):
    data = encode(state)
    back = decode(data)
    assert list(back) == sorted(state)
    for k, v in state.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    assert encode(back) == data


def test_file_round_trip(tmp_path):
    state = {"a": np.random.default_rng(0).normal(size=(4, 5)).astype(np.float32), "z": np.int64(3)}
    p1, p2 = tmp_path / "one.lwb", tmp_path / "two.lwb"
    save_checkpoint(state, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic():
    data = bytearray(encode({"t": np.float32(1.0)}))
    data[0:1] = b"X"
    with pytest.raises(BadMagicError):
        decode(bytes(data))


def test_version_mismatch():
    data = bytearray(encode({"t": np.float32(1.0)}))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError):
        decode(bytes(data))


def test_truncated_payload():
    data = encode({"t": np.zeros(4, dtype=np.float32)})
    for cut in (10, 20, len(data) - 1):
        with pytest.raises(TruncatedError):
            decode(data[:cut])


def test_duplicate_names():
    header = b"t:f32:\nt:f32:\n"
    data = b"LWB1" + struct.pack("<IQ", 1, len(header)) + header + b"\0" * 2 + b"\0" * 8
    with pytest.raises(DuplicateNameError):
        decode(data)


def test_error_classes_are_distinct():
    classes = {BadMagicError, VersionMismatchError, TruncatedError, DuplicateNameError, HeaderError}
    assert len(classes) == 5 and all(issubclass(c, CheckpointError) for c in classes)
    assert not any(issubclass(a, b) for a in classes for b in classes if a is not b)


def test_malformed_headers():
    def build(header, payload=b""):
        prefix = b"LWB1" + struct.pack("<IQ", 1, len(header)) + header
        return prefix + b"\0" * (-len(prefix) % 8) + payload

    for header in (b"b:f32:\na:f32:\n", b"t:f16:\n", b"t:f32:2xq\n", b"t:f32", b"t:f32:\n\n"):
        with pytest.raises(HeaderError):
            decode(build(header, b"\0" * 8))
    with pytest.raises(CheckpointError, match="trailing"):
        decode(encode({"t": np.float32(1.0)}) + b"\0")
    with pytest.raises(HeaderError):
        encode({"a:b": np.float32(1.0)})
    with pytest.raises(CheckpointError):
        encode({"c": np.complex64(1.0)})


def test_header_entries_are_lexicographic(tmp_path):
    path = tmp_path / "c.lwb"
    save_checkpoint({"zeta": np.zeros(2), "alpha": np.zeros((1, 2), np.float32), "mid": np.int64(1)}, path)
    assert header_entries(path) == [("alpha", "f32", (1, 2)), ("mid", "i64", ()), ("zeta", "f64", (2,))]


def test_text_entries():
    assert entry_text(text_entry("rank = 2\nmode = \"tanh\"\n")) == 'rank = 2\nmode = "tanh"\n'


def test_network_round_trip(tiny_run, tmp_path):
    path = tmp_path / "net.lwb"
    save_net(tiny_run.net, path, "full")
    net, kind = load_net(path)
    assert kind == "full" and net.cfg == tiny_run.cfg and net.attached == tiny_run.net.attached
    assert all(net.params[k].tobytes() == v.tobytes() for k, v in tiny_run.net.params.items())
    again = tmp_path / "again.lwb"
    save_net(net, again, kind)
    assert again.read_bytes() == path.read_bytes()
    assert {"meta.config", "meta.kind", "meta.seed"} <= {e[0] for e in header_entries(path)}


def test_plain_state_is_not_a_network(tmp_path):
    path = tmp_path / "plain.lwb"
    save_checkpoint({"t": np.float32(1.0)}, path)
    with pytest.raises(CheckpointError, match="not a model checkpoint"):
        load_net(path)
