"""One-sided power spectral density over 40 ms windows.

A 2000-sample window at 50 kS/s is mean-removed, Hann-weighted and
zero-padded to a 4096-point transform.  Keeping bins 0..2047 gives the
2048-point spectrum consumed by the analytics; df = fs/4096.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NFFT",
    "N_BINS",
    "WINDOW_SECONDS",
    "Psd",
    "hann",
    "window_length",
    "compute_psd",
    "psd_windows",
]

NFFT = 4096
N_BINS = NFFT // 2
WINDOW_SECONDS = 0.040


@dataclass(frozen=True)
class Psd:
    bins: np.ndarray  # W^2/Hz
    df: float
    fs: float
    window_id: int = 0
    t_start: int = 0  # ns

    def __post_init__(self):
        b = np.asarray(self.bins, dtype=float)
        if b.shape != (N_BINS,):
            raise ValueError(f"a Psd has exactly {N_BINS} bins, got {b.shape}")
        if np.any(b < 0) or not np.all(np.isfinite(b)):
            raise ValueError("PSD bins must be finite and non-negative")
        object.__setattr__(self, "bins", b)

    @property
    def freqs(self) -> np.ndarray:
        return np.arange(N_BINS) * self.df

    def db(self, floor: float = 1e-30) -> np.ndarray:
        return 10.0 * np.log10(np.maximum(self.bins, floor))

    def band_power(self, f_lo: float, f_hi: float) -> float:
        f = self.freqs
        m = (f >= f_lo) & (f <= f_hi)
        return float(self.bins[m].sum() * self.df)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (the DFT-even form)."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def window_length(fs: float) -> int:
    return int(round(fs * WINDOW_SECONDS))


def _periodogram(x: np.ndarray, fs: float, w: np.ndarray) -> np.ndarray:
    xw = (x - x.mean()) * w
    spec = np.fft.rfft(xw, n=NFFT)[:N_BINS]
    p = np.abs(spec) ** 2 / (fs * np.sum(w * w))
    p[1:] *= 2.0  # fold negative frequencies, DC is not mirrored
    return p


def compute_psd(samples, fs: float = 50_000.0, n_average: int = 1,
                window_id: int = 0, t_start: int = 0) -> Psd:
    """Periodogram of one 40 ms window, or the mean of ``n_average`` consecutive ones."""
    if fs <= 0:
        raise ValueError("fs must be > 0")
    n = window_length(fs)
    if not 2 <= n <= NFFT:
        raise ValueError(f"a 40 ms window at fs={fs} does not fit a {NFFT}-point transform")
    x = np.asarray(samples, dtype=float)
    if n_average < 1 or x.ndim != 1 or x.size != n * n_average:
        raise ValueError(f"expected {n * max(n_average, 1)} samples ({n_average} x {n}), got {x.size}")
    w = hann(n)
    acc = np.zeros(N_BINS)
    for k in range(n_average):
        acc += _periodogram(x[k * n:(k + 1) * n], fs, w)
    return Psd(acc / n_average, fs / NFFT, fs, window_id, int(t_start))


def psd_windows(samples, fs: float = 50_000.0, t0: int = 0, n_average: int = 1):
    """Split a long stream into consecutive non-overlapping windows."""
    n = window_length(fs) * n_average
    x = np.asarray(samples, dtype=float)
    step_ns = n / fs * 1e9
    return [
        compute_psd(x[k * n:(k + 1) * n], fs, n_average, window_id=k, t_start=int(t0 + round(k * step_ns)))
        for k in range(x.size // n)
    ]
