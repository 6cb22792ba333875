"""Wire frames of the telemetry fabric.  Byte layout is documented in PROTOCOL.md.

    magic   2 bytes  b"DG"
    type    u8       FrameType
    flags   u8       per-type meaning
    [topic  u16 length + UTF-8]      PUBLISH and SUBSCRIBE only
    [payload u32 length + bytes]     every type except PING, PONG, DISCONNECT

All integers little-endian.  A frame never exceeds MAX_FRAME bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

__all__ = [
    "MAGIC",
    "MAX_FRAME",
    "FrameType",
    "Frame",
    "ProtocolError",
    "BadMagic",
    "UnknownType",
    "OversizeFrame",
    "TruncatedFrame",
    "MalformedFrame",
    "encode_frame",
    "decode_frame",
    "publish_prefix",
    "FrameReader",
]

MAGIC = b"DG"
MAX_FRAME = 64 * 1024

_HEAD = struct.Struct("<2sBB")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


class FrameType(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    SUBSCRIBE = 4
    SUBACK = 5
    PING = 6
    PONG = 7
    DISCONNECT = 8


_BARE = frozenset({FrameType.PING, FrameType.PONG, FrameType.DISCONNECT})
_TOPIC = frozenset({FrameType.PUBLISH, FrameType.SUBSCRIBE})
_TYPES = {int(t): t for t in FrameType}


class ProtocolError(Exception):
    """Any wire violation; fatal for the connection that sent it."""


class BadMagic(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


class OversizeFrame(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    """Not enough bytes yet.  For a stream this means: wait for more."""


class MalformedFrame(ProtocolError):
    pass


@dataclass(frozen=True)
class Frame:
    type: FrameType
    flags: int = 0
    topic: str = ""
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "type", FrameType(self.type))
        if not 0 <= self.flags <= 0xFF:
            raise ValueError("flags is one byte")
        if self.type in _TOPIC and not self.topic:
            raise ValueError(f"{self.type.name} needs a non-empty topic")
        if self.type not in _TOPIC and self.topic:
            raise ValueError(f"{self.type.name} carries no topic")
        if self.type in _BARE and self.payload:
            raise ValueError(f"{self.type.name} carries no payload")


def _size(ftype, topic_bytes: int, payload: int) -> int:
    n = _HEAD.size
    if ftype in _TOPIC:
        n += 2 + topic_bytes
    if ftype not in _BARE:
        n += 4 + payload
    return n


def encode_frame(frame: Frame) -> bytes:
    t = frame.type
    tb = frame.topic.encode("utf-8")
    payload = bytes(frame.payload)
    if _size(t, len(tb), len(payload)) > MAX_FRAME:
        raise OversizeFrame(f"frame of {_size(t, len(tb), len(payload))} bytes exceeds {MAX_FRAME}")
    parts = [_HEAD.pack(MAGIC, int(t), frame.flags)]
    if t in _TOPIC:
        parts += [_U16.pack(len(tb)), tb]
    if t not in _BARE:
        parts += [_U32.pack(len(payload)), payload]
    return b"".join(parts)


def publish_prefix(topic: str, flags: int = 0, payload_len: int = 16) -> bytes:
    """Everything of a PUBLISH frame before the payload (hot-path helper)."""
    tb = topic.encode("utf-8")
    if _size(FrameType.PUBLISH, len(tb), payload_len) > MAX_FRAME:
        raise OversizeFrame("frame too large")
    return _HEAD.pack(MAGIC, int(FrameType.PUBLISH), flags) + _U16.pack(len(tb)) + tb + _U32.pack(payload_len)


def decode_frame(buf, offset: int = 0):
    """Parse one frame starting at ``offset``; returns ``(frame, consumed)``.

    Length fields are checked against MAX_FRAME before any body byte is
    read, and nothing past the declared frame end is ever inspected.
    """
    mv = memoryview(buf)
    avail = len(mv) - offset
    if avail < _HEAD.size:
        raise TruncatedFrame("incomplete header")
    magic, tcode, flags = _HEAD.unpack_from(mv, offset)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {bytes(magic)!r}")
    ftype = _TYPES.get(tcode)
    if ftype is None:
        raise UnknownType(f"unknown frame type {tcode}")
    pos = offset + _HEAD.size
    topic = ""
    if ftype in _TOPIC:
        if len(mv) - pos < 2:
            raise TruncatedFrame("incomplete topic length")
        (tlen,) = _U16.unpack_from(mv, pos)
        if _size(ftype, tlen, 0) > MAX_FRAME:
            raise OversizeFrame("topic length beyond frame limit")
        pos += 2
        if tlen == 0:
            raise MalformedFrame("empty topic")
        if len(mv) - pos < tlen:
            raise TruncatedFrame("incomplete topic")
        try:
            topic = str(mv[pos:pos + tlen], "utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFrame("topic is not UTF-8") from exc
        pos += tlen
    payload = b""
    if ftype not in _BARE:
        if len(mv) - pos < 4:
            raise TruncatedFrame("incomplete payload length")
        (plen,) = _U32.unpack_from(mv, pos)
        if (pos - offset) + 4 + plen > MAX_FRAME:
            raise OversizeFrame(f"declared payload of {plen} bytes exceeds the frame limit")
        pos += 4
        if len(mv) - pos < plen:
            raise TruncatedFrame("incomplete payload")
        payload = bytes(mv[pos:pos + plen])
        pos += plen
    return Frame(ftype, flags, topic, payload), pos - offset


class FrameReader:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data) -> list[Frame]:
        self._buf += data
        out = []
        off = 0
        buf = self._buf
        while True:
            try:
                frame, n = decode_frame(buf, off)
            except TruncatedFrame:
                break
            out.append(frame)
            off += n
        if off:
            del self._buf[:off]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)
