"""Peak picking, harmonic combs and duty-cycle estimation on a Psd."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .psd import NFFT, Psd, window_length

__all__ = [
    "Peak",
    "Comb",
    "Signature",
    "InsufficientDataError",
    "noise_floor_db",
    "detect_peaks",
    "detect_comb",
    "harmonic_amplitudes",
    "duty_envelope",
    "duty_residual",
    "estimate_duty",
    "extract_signature",
]

DEFAULT_PROMINENCE_DB = 10.0
FLOOR_KERNEL = 51
# median of an exponential variable sits ln 2 below its mean
_MEDIAN_BIAS_DB = 10 * math.log10(1 / math.log(2))


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class Peak:
    frequency: float
    magnitude_db: float
    prominence_db: float
    bin: int = 0


@dataclass(frozen=True)
class Comb:
    f0: float
    n_harmonics: int
    score: float
    members: tuple = ()  # ((k, Peak), ...)

    @property
    def harmonics(self):
        return tuple(k for k, _ in self.members)


@dataclass
class Signature:
    peaks: list = field(default_factory=list)
    combs: list = field(default_factory=list)
    label: str | None = None


def noise_floor_db(db: np.ndarray, kernel: int = FLOOR_KERNEL, skip: int = 4) -> np.ndarray:
    """Rolling median of the dB spectrum raised to the mean-power level.

    The first ``skip`` bins (depressed by mean removal) are left out and the
    band edges are mirrored, so neither end drags the floor down.
    """
    db = np.asarray(db, dtype=float)
    out = np.empty_like(db)
    out[skip:] = ndimage.median_filter(db[skip:], size=kernel, mode="mirror")
    out[:skip] = out[skip] if skip < db.size else 0.0
    return out + _MEDIAN_BIAS_DB


def _hann_skirt_db(r):
    """Upper envelope of the Hann leakage, ``r`` in resolution bins (r > 2)."""
    return 20 * np.log10(1.0 / (np.pi * r * np.abs(r * r - 1.0)))


def _parabolic(db, k):
    a, b, c = db[k - 1], db[k], db[k + 1]
    den = a - 2 * b + c
    if den == 0:
        return 0.0, b
    p = 0.5 * (a - c) / den
    return p, b - 0.25 * (a - c) * p


def detect_peaks(psd: Psd, min_prominence_db: float = DEFAULT_PROMINENCE_DB,
                 floor_kernel: int = FLOOR_KERNEL, min_bin: int = 4,
                 leakage_margin_db: float = 6.0) -> list[Peak]:
    """Local maxima standing ``min_prominence_db`` over the rolling floor.

    Maxima that sit inside the Hann leakage skirt of a stronger peak (plus
    ``leakage_margin_db``) are side lobes, not components, and are dropped.
    """
    if min_prominence_db <= 0:
        raise ValueError("min_prominence_db must be > 0")
    db = psd.db()
    floor = noise_floor_db(db, floor_kernel, max(min_bin, 1))
    k = np.arange(max(min_bin, 1), db.size - 1)
    is_max = (db[k] > db[k - 1]) & (db[k] >= db[k + 1])
    prom = db - floor
    cand = k[is_max & (prom[k] >= min_prominence_db)]
    if cand.size == 0:
        return []
    n_win = window_length(psd.fs)
    pad = NFFT / n_win  # transform bins per resolution bin
    order = cand[np.argsort(db[cand])[::-1]]
    kept: list[int] = []
    for c in order:
        ok = True
        for s in kept:
            r = abs(c - s) / pad
            if r <= 2.0 or db[c] < db[s] + _hann_skirt_db(r) + leakage_margin_db:
                ok = False
                break
        if ok:
            kept.append(int(c))
    peaks = []
    for c in sorted(kept):
        p, mag = _parabolic(db, c)
        peaks.append(Peak((c + p) * psd.df, float(mag), float(prom[c]), c))
    return peaks


def detect_comb(peaks, f0_min: float = 50.0, f0_max: float = 5_000.0,
                tolerance: float | None = None, min_members: int = 3,
                f_max: float | None = None) -> list[Comb]:
    """Harmonic combs among ``peaks``.

    Every peak inside ``[f0_min, f0_max]`` seeds a candidate.  Harmonics
    k = 2, 3, ... are matched to the nearest peak within ``tolerance`` of k*f0
    (missing harmonics are allowed) and f0 is refined by least squares on the
    members after every match.  Combs sharing a member keep the best score.
    """
    if not 0 < f0_min < f0_max:
        raise ValueError("need 0 < f0_min < f0_max")
    peaks = sorted(peaks, key=lambda p: p.frequency)
    if not peaks:
        return []
    freqs = np.array([p.frequency for p in peaks])
    if tolerance is None:
        tolerance = 12.5
    top = f_max if f_max is not None else freqs[-1] + tolerance
    combs = []
    for i0, seed in enumerate(peaks):
        if not f0_min <= seed.frequency <= f0_max:
            continue
        f0 = seed.frequency
        members = {1: i0}
        k = 2
        while k * f0 <= top:
            j = int(np.argmin(np.abs(freqs - k * f0)))
            if abs(freqs[j] - k * f0) <= tolerance and j not in members.values():
                members[k] = j
                ks = np.array(list(members))
                fk = freqs[list(members.values())]
                f0 = float(np.sum(ks * fk) / np.sum(ks * ks))
            k += 1
        if len(members) >= min_members:
            mem = tuple((kk, peaks[j]) for kk, j in sorted(members.items()))
            score = float(sum(p.prominence_db for _, p in mem))
            combs.append((Comb(f0, len(mem), score, mem), set(members.values())))
    combs.sort(key=lambda c: (-c[0].score, c[0].f0))
    out, used = [], set()
    for comb, idx in combs:
        if idx & used:
            continue
        used |= idx
        out.append(comb)
    return sorted(out, key=lambda c: c.f0)


def harmonic_amplitudes(psd: Psd, f0: float, n_harmonics: int = 10, search_bins: int = 2) -> np.ndarray:
    """Relative amplitude of harmonics 1..n: sqrt of the local PSD maximum near k*f0."""
    out = np.zeros(n_harmonics)
    for k in range(1, n_harmonics + 1):
        c = int(round(k * f0 / psd.df))
        lo, hi = max(c - search_bins, 0), min(c + search_bins + 1, psd.bins.size)
        if lo >= hi:
            break
        out[k - 1] = math.sqrt(psd.bins[lo:hi].max())
    return out


def duty_envelope(d, k):
    k = np.asarray(k, dtype=float)
    return np.abs(np.sin(np.pi * k * d)) / k


def duty_residual(d: float, amplitudes) -> float:
    """Least-squares residual of the best-scaled envelope at duty ``d``."""
    a = np.asarray(amplitudes, dtype=float)
    e = duty_envelope(d, np.arange(1, a.size + 1))
    ee = float(e @ e)
    scale = float(a @ e) / ee if ee > 0 else 0.0
    r = a - scale * e
    return float(r @ r)


def estimate_duty(amplitudes, f0: float | None = None, grid_step: float = 1e-3) -> float:
    """Duty cycle in (0, 0.5] whose |sin(pi k d)|/k envelope fits the harmonics.

    ``amplitudes[k-1]`` is the magnitude of harmonic k, starting with the
    fundamental.  d and 1-d give identical magnitudes; the result is folded
    to d <= 0.5.
    """
    a = np.asarray(amplitudes, dtype=float)
    if a.ndim != 1 or a.size < 3:
        raise InsufficientDataError("need at least 3 harmonic magnitudes")
    grid = np.arange(grid_step, 0.5 + grid_step / 2, grid_step)
    res = np.array([duty_residual(d, a) for d in grid])
    i = int(np.argmin(res))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    if hi > lo:
        opt = optimize.minimize_scalar(lambda d: duty_residual(d, a), bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-7})
        if opt.fun <= res[i]:
            return float(min(opt.x, 0.5))
    return float(grid[i])


def extract_signature(psd: Psd, min_prominence_db: float = DEFAULT_PROMINENCE_DB, **comb_kw) -> Signature:
    peaks = detect_peaks(psd, min_prominence_db)
    return Signature(peaks, detect_comb(peaks, **comb_kw))
