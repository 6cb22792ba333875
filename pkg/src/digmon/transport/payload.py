"""Fixed 16-byte scalar sample: u64 timestamp [ns since epoch], f64 value (LE)."""

from __future__ import annotations

import struct
from typing import NamedTuple

import numpy as np

__all__ = ["SAMPLE", "SAMPLE_SIZE", "SAMPLE_DTYPE", "SamplePayload", "pack_sample", "unpack_sample"]

SAMPLE = struct.Struct("<Qd")
SAMPLE_SIZE = SAMPLE.size
SAMPLE_DTYPE = np.dtype([("t", "<u8"), ("value", "<f8")])


class SamplePayload(NamedTuple):
    timestamp: int
    value: float

    def pack(self) -> bytes:
        return SAMPLE.pack(self.timestamp, self.value)

    @classmethod
    def unpack(cls, buf) -> "SamplePayload":
        if len(buf) != SAMPLE_SIZE:
            raise ValueError(f"sample payload is {SAMPLE_SIZE} bytes, got {len(buf)}")
        return cls(*SAMPLE.unpack(buf))


def pack_sample(t_ns: int, value: float) -> bytes:
    return SAMPLE.pack(int(t_ns), float(value))


def unpack_sample(buf) -> SamplePayload:
    return SamplePayload.unpack(buf)
