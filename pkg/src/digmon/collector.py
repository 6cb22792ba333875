"""Centralized collector and append-only per-topic time-series store.

On-disk layout (bit-exact description in docs/FORMATS.md): every concrete
topic owns ``<root>/<level dirs>/records.bin`` where each topic level maps to
a directory named ``"_" + percent-quoted level``.  A file starts with a
16-byte header and then holds fixed-size records in arrival order.
"""

from __future__ import annotations

import csv
import logging
import os
import struct
import threading
import time
from collections import OrderedDict, deque
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple
from urllib.parse import quote, unquote

import numpy as np

from .spectral.psd import NFFT
from .spectral.record import RECORD_SIZE as SPEC_SIZE, deserialize_record
from .transport.payload import SAMPLE_DTYPE, SAMPLE_SIZE
from .transport.topics import TopicFilter, validate_topic

__all__ = [
    "StoreError",
    "UnsupportedFormat",
    "Kind",
    "Record",
    "topic_to_path",
    "path_to_topic",
    "TopicStore",
    "list_topics",
    "read_topic",
    "query",
    "query_scalar",
    "export_csv",
    "export_psd",
    "Collector",
    "collector_run",
]

log = logging.getLogger(__name__)

FILE_MAGIC = b"DGTS"
FILE_VERSION = 1
FILE_HEADER = struct.Struct("<4sHBBI4x")
DATA_FILE = "records.bin"
FLAG_DIRTY = 0x01
_BLOB_HEAD = struct.Struct("<QI")


class Kind:
    SCALAR = 1
    SPECTROGRAM = 2
    BLOB = 3


class StoreError(OSError):
    pass


class UnsupportedFormat(ValueError):
    pass


class Record(NamedTuple):
    t: int
    topic: str
    value: object  # float for scalar topics, bytes otherwise


def topic_to_path(root, topic: str) -> Path:
    validate_topic(topic)
    return Path(root).joinpath(*("_" + quote(lev, safe="") for lev in topic.split("/"))) / DATA_FILE


def path_to_topic(root, path) -> str:
    rel = Path(path).relative_to(root)
    parts = rel.parts[:-1] if rel.name == DATA_FILE else rel.parts
    for p in parts:
        if not p.startswith("_"):
            raise ValueError(f"{path} is not inside the store layout")
    return "/".join(unquote(p[1:]) for p in parts)


def _kind_for(payload: bytes) -> tuple[int, int]:
    if len(payload) == SAMPLE_SIZE:
        return Kind.SCALAR, SAMPLE_SIZE
    if len(payload) == SPEC_SIZE:
        return Kind.SPECTROGRAM, SPEC_SIZE
    return Kind.BLOB, 0


class _TopicFile:
    def __init__(self, path: Path, kind: int, rec_size: int):
        self.path = path
        self.kind = kind
        self.rec_size = rec_size
        self.dirty = False
        self.last_t = None
        self.fh = None

    @classmethod
    def create_or_open(cls, path: Path, payload: bytes):
        if path.exists() and path.stat().st_size >= FILE_HEADER.size:
            kind, rec, flags = _read_header(path)
            tf = cls(path, kind, rec)
            tf.dirty = bool(flags & FLAG_DIRTY)
            tf.last_t = _last_time(path, kind, rec)
        else:
            kind, rec = _kind_for(payload)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "wb") as fh:
                fh.write(FILE_HEADER.pack(FILE_MAGIC, FILE_VERSION, kind, 0, rec))
            tf = cls(path, kind, rec)
        return tf

    def open(self):
        if self.fh is None:
            self.fh = open(self.path, "ab")
        return self.fh

    def close(self):
        if self.fh is not None:
            self.fh.close()
            self.fh = None

    def mark_dirty(self):
        self.dirty = True
        if self.fh is not None:
            self.fh.flush()
        with open(self.path, "r+b") as fh:
            fh.seek(7)
            fh.write(bytes([FLAG_DIRTY]))


def _read_header(path: Path):
    with open(path, "rb") as fh:
        raw = fh.read(FILE_HEADER.size)
    if len(raw) < FILE_HEADER.size:
        raise StoreError(f"{path}: truncated header")
    magic, version, kind, flags, rec = FILE_HEADER.unpack(raw)
    if magic != FILE_MAGIC:
        raise StoreError(f"{path}: bad magic")
    if version != FILE_VERSION:
        raise StoreError(f"{path}: unsupported store version {version}")
    return kind, rec, flags


def _last_time(path: Path, kind: int, rec: int):
    size = path.stat().st_size - FILE_HEADER.size
    if kind == Kind.BLOB:
        t = None
        for t, _ in _iter_blobs(path):
            pass
        return t
    n = size // rec
    if n == 0:
        return None
    with open(path, "rb") as fh:
        fh.seek(FILE_HEADER.size + (n - 1) * rec)
        return struct.unpack("<Q", fh.read(8))[0]


def _iter_blobs(path: Path):
    data = path.read_bytes()[FILE_HEADER.size:]
    pos = 0
    while pos + _BLOB_HEAD.size <= len(data):
        t, n = _BLOB_HEAD.unpack_from(data, pos)
        if pos + _BLOB_HEAD.size + n > len(data):
            break  # record still being written
        yield t, data[pos + _BLOB_HEAD.size:pos + _BLOB_HEAD.size + n]
        pos += _BLOB_HEAD.size + n


class TopicStore:
    """Single-writer store.  ``fsync``: "none", "flush" (default) or "always"."""

    def __init__(self, root, fsync: str = "flush", max_bytes: int | None = None, max_open: int = 256):
        self.root = Path(root)
        if fsync not in ("none", "flush", "always"):
            raise ValueError("fsync must be 'none', 'flush' or 'always'")
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            probe = self.root / ".write-probe"
            probe.write_bytes(b"")
            probe.unlink()
        except OSError as exc:
            raise StoreError(f"store root {self.root} is not writable: {exc}") from exc
        self.fsync = fsync
        self.max_bytes = max_bytes
        self.max_open = max_open
        self._files: dict[str, _TopicFile] = {}
        self._open: OrderedDict[str, _TopicFile] = OrderedDict()
        self.quarantined: dict[str, str] = {}
        self.appended = 0
        self.capped = 0
        self.out_of_order = 0
        self.bytes_written = 0

    def _file(self, topic: str, payload: bytes) -> _TopicFile:
        tf = self._files.get(topic)
        if tf is None:
            tf = _TopicFile.create_or_open(topic_to_path(self.root, topic), payload)
            self._files[topic] = tf
        if topic in self._open:
            self._open.move_to_end(topic)
        else:
            if len(self._open) >= self.max_open:
                _, old = self._open.popitem(last=False)
                old.close()
            self._open[topic] = tf
            tf.open()
        return tf

    def append(self, topic: str, payload: bytes, arrival_ns: int | None = None) -> bool:
        """Append one record; False when the topic is quarantined or the cap is hit."""
        if topic in self.quarantined:
            return False
        try:
            tf = self._file(topic, payload)
            if tf.kind == Kind.BLOB:
                t = int(arrival_ns if arrival_ns is not None else time.time_ns())
                rec = _BLOB_HEAD.pack(t, len(payload)) + payload
            else:
                if len(payload) != tf.rec_size:
                    raise UnsupportedFormat(f"{len(payload)}-byte payload on a {tf.rec_size}-byte topic")
                rec = bytes(payload)
                t = struct.unpack_from("<Q", rec, 0)[0]
            if self.max_bytes is not None and self.bytes_written + len(rec) > self.max_bytes:
                self.capped += 1
                return False
            if tf.last_t is not None and t < tf.last_t:
                self.out_of_order += 1
                if not tf.dirty:
                    tf.mark_dirty()
            tf.last_t = t if tf.last_t is None else max(tf.last_t, t)
            fh = tf.open()
            fh.write(rec)
            if self.fsync != "none":
                fh.flush()
                if self.fsync == "always":
                    os.fsync(fh.fileno())
        except (OSError, UnsupportedFormat, StoreError) as exc:
            log.warning("quarantining topic %s: %s", topic, exc)
            self.quarantined[topic] = str(exc)
            return False
        self.appended += 1
        self.bytes_written += len(rec)
        return True

    def flush(self):
        for tf in self._open.values():
            if tf.fh is not None:
                tf.fh.flush()

    def close(self):
        for tf in self._open.values():
            tf.close()
        self._open.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# read side -------------------------------------------------------------

def list_topics(root) -> list[str]:
    root = Path(root)
    if not root.exists():
        return []
    return sorted(path_to_topic(root, p) for p in root.rglob(DATA_FILE))


def _spec_dtype():
    return np.dtype([("t", "<u8"), ("rest", f"V{SPEC_SIZE - 8}")])


def read_topic(root, topic: str, t0: int = 0, t1: int = 2**64 - 1):
    """Records of one topic with t in [t0, t1], sorted by t (stable).

    Returns ``(kind, t, values)``: float64 values for scalar topics, a list
    of bytes otherwise.  Only whole records are read, so a concurrent writer
    is seen as a consistent prefix.
    """
    if t0 > t1:
        raise ValueError("t0 must be <= t1")
    path = topic_to_path(root, topic)
    if not path.exists():
        return None, np.empty(0, np.uint64), []
    kind, rec, flags = _read_header(path)
    if kind == Kind.BLOB:
        items = [(t, b) for t, b in _iter_blobs(path) if t0 <= t <= t1]
        items.sort(key=lambda x: x[0])
        return kind, np.array([t for t, _ in items], dtype=np.uint64), [b for _, b in items]
    dtype = SAMPLE_DTYPE if kind == Kind.SCALAR else _spec_dtype()
    size = path.stat().st_size - FILE_HEADER.size
    n = size // rec
    arr = np.fromfile(path, dtype=dtype, count=n, offset=FILE_HEADER.size)
    t = arr["t"]
    if flags & FLAG_DIRTY:
        # out-of-order arrivals: filter the whole file, then stable-sort
        arr = arr[(t >= t0) & (t <= t1)]
        arr = arr[np.argsort(arr["t"], kind="stable")]
    else:
        lo = np.searchsorted(t, np.uint64(t0), side="left")
        hi = np.searchsorted(t, np.uint64(t1), side="right")
        arr = arr[lo:hi]
    if kind == Kind.SCALAR:
        return kind, arr["t"].copy(), arr["value"].astype(float)
    return kind, arr["t"].copy(), [r.tobytes() for r in arr]


def query_scalar(root, topic: str, t0: int = 0, t1: int = 2**64 - 1):
    kind, t, v = read_topic(root, topic, t0, t1)
    if kind not in (None, Kind.SCALAR):
        raise UnsupportedFormat(f"{topic} is not a scalar topic")
    return t, np.asarray(v, dtype=float)


def query(root, pattern: str, t0: int = 0, t1: int = 2**64 - 1) -> list[Record]:
    """All records of topics matching ``pattern`` with t in [t0, t1], ordered by (t, topic)."""
    if t0 > t1:
        raise ValueError("t0 must be <= t1")
    flt = TopicFilter(pattern)
    out: list[Record] = []
    for topic in list_topics(root):
        if not flt.matches(topic):
            continue
        kind, t, vals = read_topic(root, topic, t0, t1)
        if kind == Kind.SCALAR:
            out.extend(Record(int(a), topic, float(b)) for a, b in zip(t, vals))
        else:
            out.extend(Record(int(a), topic, b) for a, b in zip(t, vals))
    # topics are visited in sorted order and each is time-sorted, so a
    # stable sort on t alone gives (t, topic) order
    out.sort(key=lambda r: r.t)
    return out


def export_csv(root, topic: str, t0: int, t1: int, out_path) -> int:
    kind, t, v = read_topic(root, topic, t0, t1)
    if kind not in (None, Kind.SCALAR):
        raise UnsupportedFormat(f"{topic} is not a scalar topic; use export_psd for spectrograms")
    with open(out_path, "w", newline="") as fh:
        fh.write("t_ns,value\n")
        fh.writelines(f"{int(a)},{float(b):.17g}\n" for a, b in zip(t, v))
    return int(len(t))


def export_psd(root, topic: str, t0: int, t1: int, out_path) -> int:
    """Long-format CSV ``t_ns,f_hz,psd_db``: one row per bin per stored window."""
    kind, t, recs = read_topic(root, topic, t0, t1)
    if kind not in (None, Kind.SPECTROGRAM):
        raise UnsupportedFormat(f"{topic} is not a spectrogram topic")
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ns", "f_hz", "psd_db"])
        for raw in recs:
            r = deserialize_record(raw)
            f = np.arange(r.codes.size) * (r.fs / NFFT)
            db = r.db
            for fk, dk in zip(f, db):
                w.writerow([r.t_start, f"{fk:.6g}", f"{dk:.6g}"])
    return len(recs)


# collector ---------------------------------------------------------------

@dataclass
class CollectorStats:
    received: int = 0
    stored: int = 0
    dropped: int = 0


class Collector:
    """Subscribes to ``filters`` and persists everything through a bounded queue.

    The network handler only enqueues; a writer thread owns the store.  When
    the disk stalls and the queue is full the oldest pending record is
    dropped and counted.
    """

    def __init__(self, root, filters=(), host: str = "127.0.0.1", port: int = 1883,
                 fsync: str = "flush", queue_limit: int = 100_000, max_bytes: int | None = None,
                 client_id: str = "collector"):
        self.store = TopicStore(root, fsync=fsync, max_bytes=max_bytes)
        self.filters = list(filters)
        for f in self.filters:
            TopicFilter(f)
        self.host, self.port = host, port
        self.client_id = client_id
        self.stats = CollectorStats()
        self._q: deque = deque()
        self._limit = queue_limit
        self._cv = threading.Condition()
        self._stop = False
        self._processed = 0
        self._writer = threading.Thread(target=self._write_loop, daemon=True, name="collector-writer")
        self._client = None

    def ingest(self, topic: str, payload: bytes):
        """Entry point for received messages (also usable in-process)."""
        now = time.time_ns()
        with self._cv:
            self.stats.received += 1
            if len(self._q) >= self._limit:
                self._q.popleft()
                self.stats.dropped += 1
            self._q.append((topic, payload, now))
            self._cv.notify()

    def _write_loop(self):
        while True:
            with self._cv:
                self._cv.wait_for(lambda: self._q or self._stop)
                if not self._q and self._stop:
                    return
                batch = list(self._q)
                self._q.clear()
            stored = sum(self.store.append(topic, payload, now) for topic, payload, now in batch)
            with self._cv:
                self.stats.stored += stored
                self._processed += len(batch)
                self._cv.notify_all()

    def start(self, connect: bool = True) -> "Collector":
        self._writer.start()
        if connect and self.filters:
            from .transport.client import Client

            self._client = Client(self.host, self.port, client_id=self.client_id).connect()
            for f in self.filters:
                self._client.subscribe(f, self.ingest)
        return self

    def drain(self, timeout: float = 10.0) -> bool:
        """Wait until everything received so far has been written or rejected."""
        with self._cv:
            return self._cv.wait_for(
                lambda: not self._q and self._processed + self.stats.dropped == self.stats.received, timeout)

    def close(self):
        if self._client is not None:
            self._client.close()
        with self._cv:
            self._stop = True
            self._cv.notify_all()
        if self._writer.is_alive():
            self._writer.join(10)
        self.store.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def collector_run(root, filters, host: str = "127.0.0.1", port: int = 1883, duration: float | None = None,
                  **kw) -> dict:
    """Blocking collector; returns final counters."""
    col = Collector(root, filters, host, port, **kw).start()
    try:
        if duration is None:
            while True:
                time.sleep(3600)
        time.sleep(duration)
    except KeyboardInterrupt:
        pass
    finally:
        col.drain(5)
        col.close()
    return {"received": col.stats.received, "stored": col.stats.stored, "dropped": col.stats.dropped,
            "quarantined": sorted(col.store.quarantined), "topics": len(list_topics(root))}
