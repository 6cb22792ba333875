import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from digmon.transport.frame import (
    MAX_FRAME,
    BadMagic,
    Frame,
    FrameReader,
    FrameType,
    MalformedFrame,
    OversizeFrame,
    ProtocolError,
    TruncatedFrame,
    UnknownType,
    decode_frame,
    encode_frame,
    publish_prefix,
)
from digmon.transport.payload import SAMPLE_SIZE, pack_sample, unpack_sample

BARE = [FrameType.PING, FrameType.PONG, FrameType.DISCONNECT]
TOPIC = [FrameType.PUBLISH, FrameType.SUBSCRIBE]
PLAIN = [FrameType.CONNECT, FrameType.CONNACK, FrameType.SUBACK]


def test_ping_is_four_bytes():
    assert encode_frame(Frame(FrameType.PING)) == b"DG\x06\x00"


def test_publish_layout():
    raw = encode_frame(Frame(FrameType.PUBLISH, 3, "a/b", b"xyz"))
    assert raw == b"DG" + bytes([3, 3]) + struct.pack("<H", 3) + b"a/b" + struct.pack("<I", 3) + b"xyz"
    assert publish_prefix("a/b", 3, 3) == raw[:-3]


frames = st.one_of(
    st.builds(Frame, st.sampled_from(BARE), st.integers(0, 255)),
    st.builds(Frame, st.sampled_from(PLAIN), st.integers(0, 255), st.just(""), st.binary(max_size=300)),
    st.builds(Frame, st.sampled_from(TOPIC), st.integers(0, 255),
              st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=40),
              st.binary(max_size=300)),
)


@given(frames)
def test_roundtrip(f):
    raw = encode_frame(f)
    g, n = decode_frame(raw)
    assert g == f and n == len(raw)


def test_roundtrip_many_concatenated():
    rng = np.random.default_rng(0)
    fs = []
    for i in range(10_000):
        t = FrameType(int(rng.integers(1, 9)))
        if t in BARE:
            fs.append(Frame(t, int(rng.integers(256))))
        elif t in TOPIC:
            fs.append(Frame(t, int(rng.integers(256)), f"n{i % 97}/x/{i}", rng.bytes(int(rng.integers(0, 64)))))
        else:
            fs.append(Frame(t, 0, "", rng.bytes(int(rng.integers(0, 64)))))
    stream = b"".join(encode_frame(f) for f in fs)
    out, off = [], 0
    while off < len(stream):
        g, n = decode_frame(stream, off)
        out.append(g)
        off += n
    assert out == fs
    # arbitrary chunking through the stream reader yields the same frames
    r = FrameReader()
    got = []
    cuts = np.sort(rng.integers(0, len(stream), 500))
    prev = 0
    for c in list(cuts) + [len(stream)]:
        got += r.feed(stream[prev:c])
        prev = c
    assert got == fs and r.pending == 0


def test_max_frame_limit():
    head = 4 + 2 + 1 + 4
    ok = Frame(FrameType.PUBLISH, 0, "t", bytes(MAX_FRAME - head))
    assert len(encode_frame(ok)) == MAX_FRAME
    with pytest.raises(OversizeFrame):
        encode_frame(Frame(FrameType.PUBLISH, 0, "t", bytes(MAX_FRAME - head + 1)))
    with pytest.raises(OversizeFrame):
        publish_prefix("t", 0, MAX_FRAME)


def test_declared_oversize_rejected_before_body():
    raw = b"DG" + bytes([3, 0]) + struct.pack("<H", 1) + b"t" + struct.pack("<I", 10**9)
    with pytest.raises(OversizeFrame):
        decode_frame(raw)
    raw = b"DG" + bytes([3, 0]) + struct.pack("<H", 65535)
    with pytest.raises(OversizeFrame):
        decode_frame(raw)


def test_bad_magic_and_type():
    with pytest.raises(BadMagic):
        decode_frame(b"XX\x06\x00")
    for code in (0, 9, 255):
        with pytest.raises(UnknownType):
            decode_frame(b"DG" + bytes([code, 0]))


def test_truncation_at_every_cut():
    raw = encode_frame(Frame(FrameType.PUBLISH, 1, "node/pwr", pack_sample(5, 1.5)))
    for cut in range(len(raw)):
        with pytest.raises(TruncatedFrame):
            decode_frame(raw[:cut])


def test_malformed_topic():
    raw = b"DG" + bytes([3, 0]) + struct.pack("<H", 0) + struct.pack("<I", 0)
    with pytest.raises(MalformedFrame):
        decode_frame(raw)
    raw = b"DG" + bytes([3, 0]) + struct.pack("<H", 2) + b"\xff\xfe" + struct.pack("<I", 0)
    with pytest.raises(MalformedFrame):
        decode_frame(raw)


def test_frame_constructor_validation():
    with pytest.raises(ValueError):
        Frame(FrameType.PUBLISH, 0, "", b"x")
    with pytest.raises(ValueError):
        Frame(FrameType.PING, 0, "", b"x")
    with pytest.raises(ValueError):
        Frame(FrameType.CONNECT, 0, "t")
    with pytest.raises(ValueError):
        Frame(FrameType.PING, 256)


def test_fuzz_never_crashes_unexpectedly():
    rng = np.random.default_rng(1)
    n_ok = 0
    for i in range(1_000_000 // 50):
        # random strings, half of them starting with a valid header to reach the body parser
        n = int(rng.integers(0, 40))
        buf = rng.bytes(n)
        if i % 2:
            buf = b"DG" + bytes([int(rng.integers(1, 9))]) + buf
        try:
            f, used = decode_frame(buf)
        except ProtocolError:
            continue
        assert 0 < used <= len(buf)
        assert encode_frame(f) == buf[:used]
        n_ok += 1
    assert n_ok > 0


@given(st.binary(max_size=200))
def test_fuzz_property(buf):
    try:
        f, used = decode_frame(buf)
    except ProtocolError:
        return
    assert encode_frame(f) == buf[:used]


def test_reader_raises_on_garbage():
    r = FrameReader()
    with pytest.raises(BadMagic):
        r.feed(b"NOPE")


@given(st.integers(0, 2**64 - 1), st.floats(allow_nan=False))
def test_sample_payload(t, v):
    raw = pack_sample(t, v)
    assert len(raw) == SAMPLE_SIZE == 16
    assert tuple(unpack_sample(raw)) == (t, v)


def test_sample_payload_wrong_size():
    with pytest.raises(ValueError):
        unpack_sample(b"\x00" * 15)
