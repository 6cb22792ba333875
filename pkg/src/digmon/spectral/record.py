"""Bit-exact spectrogram record: 16-byte header plus 4096-byte payload.

Header (little-endian): u64 t_start [ns], f32 fs [Hz], i16 scale_min [dB],
i16 scale_max [dB].  Payload: 2048 u16 codes on a linear dB scale, code 0 at
or below scale_min and 65535 at or above scale_max.
"""

from __future__ import annotations

import struct

import numpy as np

from .psd import N_BINS, NFFT, Psd

__all__ = [
    "HEADER",
    "HEADER_SIZE",
    "PAYLOAD_SIZE",
    "RECORD_SIZE",
    "DB_MIN",
    "DB_MAX",
    "CODE_MAX",
    "encode_db",
    "decode_db",
    "serialize_spectrogram",
    "serialize_record",
    "deserialize_record",
    "SpectrogramRecord",
]

HEADER = struct.Struct("<Qfhh")
HEADER_SIZE = HEADER.size
PAYLOAD_SIZE = 2 * N_BINS
RECORD_SIZE = HEADER_SIZE + PAYLOAD_SIZE
DB_MIN = -100
DB_MAX = 60
CODE_MAX = 0xFFFF


def encode_db(db, db_min: float = DB_MIN, db_max: float = DB_MAX) -> np.ndarray:
    db = np.asarray(db, dtype=float)
    x = (np.nan_to_num(db, nan=db_min, neginf=db_min, posinf=db_max) - db_min) / (db_max - db_min)
    return np.rint(np.clip(x, 0.0, 1.0) * CODE_MAX).astype("<u2")


def decode_db(codes, db_min: float = DB_MIN, db_max: float = DB_MAX) -> np.ndarray:
    return db_min + np.asarray(codes, dtype=float) * (db_max - db_min) / CODE_MAX


def _psd_db(psd: Psd) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(psd.bins)


def serialize_spectrogram(psd: Psd, db_min: int = DB_MIN, db_max: int = DB_MAX) -> bytes:
    """The 4096-byte payload alone."""
    if not db_min < db_max:
        raise ValueError("scale minimum must be below the maximum")
    return encode_db(_psd_db(psd), db_min, db_max).tobytes()


def serialize_record(psd: Psd, db_min: int = DB_MIN, db_max: int = DB_MAX) -> bytes:
    """Header plus payload, 4112 bytes."""
    head = HEADER.pack(int(psd.t_start), float(psd.fs), int(db_min), int(db_max))
    return head + serialize_spectrogram(psd, db_min, db_max)


class SpectrogramRecord:
    __slots__ = ("t_start", "fs", "db_min", "db_max", "codes")

    def __init__(self, t_start, fs, db_min, db_max, codes):
        self.t_start, self.fs, self.db_min, self.db_max, self.codes = t_start, fs, db_min, db_max, codes

    @property
    def db(self) -> np.ndarray:
        return decode_db(self.codes, self.db_min, self.db_max)

    def to_psd(self) -> Psd:
        """Approximate linear PSD (floor codes map to exactly zero)."""
        bins = np.where(self.codes == 0, 0.0, 10.0 ** (self.db / 10.0))
        return Psd(bins, self.fs / NFFT, self.fs, 0, self.t_start)


def deserialize_record(buf: bytes) -> SpectrogramRecord:
    if len(buf) != RECORD_SIZE:
        raise ValueError(f"spectrogram record must be {RECORD_SIZE} bytes, got {len(buf)}")
    t_start, fs, lo, hi = HEADER.unpack_from(buf, 0)
    codes = np.frombuffer(buf, dtype="<u2", offset=HEADER_SIZE, count=N_BINS).copy()
    return SpectrogramRecord(t_start, float(fs), lo, hi, codes)
