"""Embedded acquisition: SAR conversion, hardware averaging, FIFOs, timestamps.

The ADC samples both channels continuously at ``fs_adc``, averages every
``avg`` conversions in hardware and pushes the averaged pairs into a hardware
FIFO.  When ``watermark`` pairs are queued the driver flushes them as one
:class:`RawBlock` into the kernel FIFO, stamped once with the local clock.
Per-sample times are then derived backwards from that flush stamp.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

__all__ = [
    "AdcConfig",
    "ClockModel",
    "RawBlock",
    "KernelFifo",
    "KernelFifoOverflow",
    "AdcPipeline",
    "quantize",
    "hw_average",
    "acquire",
    "derive_timestamps",
]

NS = 1_000_000_000


@dataclass(frozen=True)
class AdcConfig:
    fs_adc: float = 800_000.0
    avg: int = 16
    resolution_bits: int = 12
    full_scale: float = 1.8
    watermark: int = 16
    kernel_fifo_capacity: int = 4096

    def __post_init__(self):
        if self.fs_adc <= 0:
            raise ValueError("fs_adc must be > 0")
        if self.avg < 1 or self.watermark < 1:
            raise ValueError("avg and watermark must be >= 1")
        if not 8 <= self.resolution_bits <= 16:
            raise ValueError("resolution_bits must be in [8, 16]")
        if self.kernel_fifo_capacity < 1:
            raise ValueError("kernel_fifo_capacity must be >= 1")

    @property
    def fs(self) -> float:
        """Effective sample rate after hardware averaging."""
        return self.fs_adc / self.avg

    @property
    def lsb(self) -> float:
        return self.full_scale / (1 << self.resolution_bits)

    @property
    def max_code(self) -> int:
        return (1 << self.resolution_bits) - 1


@dataclass(frozen=True)
class ClockModel:
    """Local clock of the monitoring board: ``local = true*(1+drift) + offset``.

    Gaussian jitter of ``jitter_sigma`` seconds is applied to each flush stamp.
    """

    offset: float = 0.0
    drift: float = 0.0
    jitter_sigma: float = 200e-9

    def __post_init__(self):
        if abs(self.drift) >= 1e-3:
            raise ValueError("|drift| must be < 1e-3")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")

    @classmethod
    def ideal(cls) -> "ClockModel":
        return cls(jitter_sigma=0.0)


@dataclass
class RawBlock:
    flush_timestamp: int
    codes_i: np.ndarray
    codes_v: np.ndarray
    sequence: int

    def __len__(self):
        return len(self.codes_i)


def quantize(v_in, cfg: AdcConfig):
    """Ideal SAR transfer: ``clamp(floor(v / LSB), 0, 2**bits - 1)``."""
    v = np.asarray(v_in, dtype=float)
    code = np.clip(np.floor(v / cfg.lsb), 0, cfg.max_code).astype(np.int64)
    return int(code) if code.ndim == 0 else code


def _round_half_up_mean(sums: np.ndarray, n: int) -> np.ndarray:
    # floor(sum/n + 1/2) in exact integer arithmetic
    return (2 * sums + n) // (2 * n)


def hw_average(codes, avg: int | None = None) -> int:
    """Mean of one group of raw codes, rounded half up."""
    codes = np.asarray(codes, dtype=np.int64)
    n = codes.size if avg is None else avg
    if codes.ndim != 1 or codes.size != n or n < 1:
        raise ValueError(f"expected {n} raw codes, got shape {codes.shape}")
    return int(_round_half_up_mean(codes.sum(), n))


class KernelFifoOverflow(RuntimeError):
    """Raised on drain when blocks were dropped since the previous drain.

    ``blocks`` holds what was drained anyway, so the consumer can continue.
    """

    def __init__(self, dropped: int, blocks: list[RawBlock]):
        super().__init__(f"kernel FIFO overflow: {dropped} block(s) dropped")
        self.dropped = dropped
        self.blocks = blocks


class KernelFifo:
    """Bounded block queue between the driver (producer) and the daemon.

    Never blocks the producer: a push into a full queue drops the new block.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._q: deque[RawBlock] = deque()
        self._cond = threading.Condition()
        self.dropped_total = 0
        self._dropped_unreported = 0

    def push(self, block: RawBlock) -> bool:
        with self._cond:
            if len(self._q) >= self.capacity:
                self.dropped_total += 1
                self._dropped_unreported += 1
                return False
            self._q.append(block)
            self._cond.notify()
            return True

    def __len__(self):
        with self._cond:
            return len(self._q)

    def drain(self, timeout: float | None = 0.0) -> list[RawBlock]:
        with self._cond:
            if not self._q and timeout != 0.0:
                self._cond.wait(timeout)
            blocks = list(self._q)
            self._q.clear()
            dropped, self._dropped_unreported = self._dropped_unreported, 0
        if dropped:
            raise KernelFifoOverflow(dropped, blocks)
        return blocks


@dataclass
class AdcPipeline:
    """Stateful acquisition of a continuous two-channel input stream.

    Feed ADC-input voltages sampled at ``cfg.fs_adc`` in chunks of any size;
    full blocks come out as soon as they are complete.  ``t0`` is the true
    time of raw conversion 0 in seconds.
    """

    cfg: AdcConfig = field(default_factory=AdcConfig)
    clock: ClockModel = field(default_factory=ClockModel)
    fifo: KernelFifo | None = None
    seed: object = None
    t0: float = 0.0

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)
        self._raw_i = np.empty(0, dtype=np.int64)
        self._raw_v = np.empty(0, dtype=np.int64)
        self._avg_i = np.empty(0, dtype=np.int64)
        self._avg_v = np.empty(0, dtype=np.int64)
        self.n_averaged = 0  # averaged samples flushed or pending
        self.sequence = 0
        self.blocks_out = 0

    def _flush_stamp(self, last_avg_index: np.ndarray) -> np.ndarray:
        # true time of the last raw conversion belonging to the averaged sample
        raw_index = (last_avg_index + 1) * self.cfg.avg - 1
        t_true = self.t0 * NS + raw_index * (NS / self.cfg.fs_adc)
        local = t_true * (1.0 + self.clock.drift) + self.clock.offset * NS
        if self.clock.jitter_sigma > 0:
            local = local + self._rng.normal(0.0, self.clock.jitter_sigma * NS, local.shape)
        return np.rint(local).astype(np.int64)

    def convert(self, v_i, v_v):
        """Quantize and hardware-average; returns newly completed averaged codes."""
        cfg = self.cfg
        qi = quantize(np.atleast_1d(v_i), cfg)
        qv = quantize(np.atleast_1d(v_v), cfg)
        raw_i = np.concatenate([self._raw_i, qi])
        raw_v = np.concatenate([self._raw_v, qv])
        n_groups = raw_i.size // cfg.avg
        cut = n_groups * cfg.avg
        self._raw_i, self._raw_v = raw_i[cut:], raw_v[cut:]
        sums_i = raw_i[:cut].reshape(n_groups, cfg.avg).sum(axis=1)
        sums_v = raw_v[:cut].reshape(n_groups, cfg.avg).sum(axis=1)
        return _round_half_up_mean(sums_i, cfg.avg), _round_half_up_mean(sums_v, cfg.avg)

    def feed(self, v_i, v_v) -> list[RawBlock]:
        avg_i, avg_v = self.convert(v_i, v_v)
        buf_i = np.concatenate([self._avg_i, avg_i])
        buf_v = np.concatenate([self._avg_v, avg_v])
        w = self.cfg.watermark
        nblk = buf_i.size // w
        cut = nblk * w
        self._avg_i, self._avg_v = buf_i[cut:], buf_v[cut:]
        if nblk == 0:
            return []
        first = self.n_averaged
        last_idx = first + (np.arange(nblk) + 1) * w - 1
        stamps = self._flush_stamp(last_idx)
        bi = buf_i[:cut].reshape(nblk, w)
        bv = buf_v[:cut].reshape(nblk, w)
        blocks = [
            RawBlock(int(stamps[k]), bi[k], bv[k], self.sequence + k)
            for k in range(nblk)
        ]
        self.sequence += nblk
        self.n_averaged += cut
        self._push(blocks)
        return blocks

    def finish(self) -> list[RawBlock]:
        """Flush the trailing partial block (stream end)."""
        n = self._avg_i.size
        if n == 0:
            return []
        stamp = self._flush_stamp(np.array([self.n_averaged + n - 1]))[0]
        block = RawBlock(int(stamp), self._avg_i, self._avg_v, self.sequence)
        self.sequence += 1
        self.n_averaged += n
        self._avg_i = np.empty(0, dtype=np.int64)
        self._avg_v = np.empty(0, dtype=np.int64)
        self._push([block])
        return [block]

    def _push(self, blocks):
        self.blocks_out += len(blocks)
        if self.fifo is not None:
            for b in blocks:
                self.fifo.push(b)


def acquire(v_i, v_v, cfg: AdcConfig | None = None, clock: ClockModel | None = None,
            seed=None, t0: float = 0.0) -> Iterator[RawBlock]:
    """One-shot acquisition of a finite stream, ending with any partial block."""
    pipe = AdcPipeline(cfg or AdcConfig(), clock or ClockModel(), seed=seed, t0=t0)
    yield from pipe.feed(v_i, v_v)
    yield from pipe.finish()


def derive_timestamps(block: RawBlock, fs: float) -> np.ndarray:
    """Per-sample stamps (ns): the last sample carries the flush stamp."""
    if fs <= 0:
        raise ValueError("fs must be > 0")
    w = len(block)
    back = np.rint((w - 1 - np.arange(w)) * (NS / fs)).astype(np.int64)
    return block.flush_timestamp - back
