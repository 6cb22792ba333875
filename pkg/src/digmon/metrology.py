"""Measurement uncertainty and the precision-driven software averaging controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "InsufficientDataError",
    "UncertaintyEstimate",
    "AveragingPolicy",
    "RateSelection",
    "sigma_power",
    "estimate_noise",
    "software_average",
    "predicted_sigma",
    "select_rate",
    "RateController",
]


class InsufficientDataError(ValueError):
    pass


def sigma_power(i_mean, v_mean, sigma_i, sigma_v):
    """First-order propagation for P = V*I with uncorrelated channel errors."""
    if np.any(np.asarray(sigma_i) < 0) or np.any(np.asarray(sigma_v) < 0):
        raise ValueError("standard deviations must be non-negative")
    return np.sqrt((i_mean * sigma_v) ** 2 + (v_mean * sigma_i) ** 2)


@dataclass(frozen=True)
class UncertaintyEstimate:
    sigma_i: float
    sigma_v: float
    sigma_p: float
    cv: float
    window_len: int
    effective_rate: float
    mean_i: float = 0.0
    mean_v: float = 0.0
    mean_p: float = 0.0

    def __post_init__(self):
        if min(self.sigma_i, self.sigma_v, self.sigma_p, self.cv) < 0:
            raise ValueError("sigmas and cv must be >= 0")
        if self.window_len < 2:
            raise ValueError("window_len must be >= 2")


def estimate_noise(current, voltage, rate: float = 50_000.0) -> UncertaintyEstimate:
    """Channel noise over an (assumed stationary) window of calibrated samples."""
    i = np.asarray(current, dtype=float)
    v = np.asarray(voltage, dtype=float)
    if i.shape != v.shape:
        raise ValueError("current and voltage windows differ in length")
    if i.size < 2:
        raise InsufficientDataError("noise estimate needs at least 2 samples")
    mi, mv = float(i.mean()), float(v.mean())
    si, sv = float(i.std(ddof=1)), float(v.std(ddof=1))
    sp = float(sigma_power(mi, mv, si, sv))
    mp = float(np.mean(i * v))
    cv = sp / abs(mp) if mp != 0 else (0.0 if sp == 0 else math.inf)
    return UncertaintyEstimate(si, sv, sp, cv, int(i.size), float(rate), mi, mv, mp)


def software_average(values, factor: int, timestamps=None):
    """Means of ``factor`` consecutive samples; a trailing remainder is dropped.

    With ``timestamps`` (int64 ns) the mean member time is returned as well.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("averaging factor must be >= 1")
    x = np.asarray(values, dtype=float)
    n = x.size // factor
    out = x[: n * factor].reshape(n, factor).mean(axis=1)
    if timestamps is None:
        return out
    t = np.asarray(timestamps, dtype=np.int64)[: n * factor].reshape(n, factor)
    # offset from the first member keeps the sum far from int64 overflow
    base = t[:, :1]
    t_out = base[:, 0] + (t - base).sum(axis=1) // factor
    return out, t_out


@dataclass(frozen=True)
class AveragingPolicy:
    sigma_target: float = 0.5
    rate_ladder: tuple = (50_000.0, 25_000.0, 1_000.0, 1.0)
    low_current_threshold: float = 5.0
    dwell: float = 1.0

    def __post_init__(self):
        ladder = tuple(float(r) for r in self.rate_ladder)
        object.__setattr__(self, "rate_ladder", ladder)
        if not ladder or any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ValueError("rate_ladder must be non-empty and strictly decreasing")
        if ladder[-1] <= 0:
            raise ValueError("ladder rates must be > 0")
        if self.sigma_target <= 0:
            raise ValueError("sigma_target must be > 0")
        if self.dwell <= 0:
            raise ValueError("dwell must be > 0")


def predicted_sigma(sigma_top: float, f_top: float, f: float) -> float:
    """White-noise prediction of sigma after averaging from ``f_top`` down to ``f``."""
    return sigma_top / math.sqrt(f_top / f)


@dataclass(frozen=True)
class RateSelection:
    rate: float
    precision_unmet: bool
    predicted_sigma: float
    low_current: bool = False  # mean current under the policy's low-current threshold


def select_rate(estimate: UncertaintyEstimate, policy: AveragingPolicy) -> RateSelection:
    """Fastest ladder rate whose predicted sigma meets the target (no hysteresis)."""
    ladder = policy.rate_ladder
    f_top = ladder[0]
    # the estimate may come from a slower stream; rescale it to the top rate
    sigma_top = estimate.sigma_p * math.sqrt(f_top / estimate.effective_rate)
    low = abs(estimate.mean_i) < policy.low_current_threshold
    for f in ladder:
        s = predicted_sigma(sigma_top, f_top, f)
        # relative slack so an exact hit is not lost to rounding
        if s <= policy.sigma_target * (1 + 1e-12):
            return RateSelection(f, False, s, low)
    return RateSelection(ladder[-1], True, predicted_sigma(sigma_top, f_top, ladder[-1]), low)


@dataclass
class RateController:
    """Applies :func:`select_rate` with a dwell-time hysteresis.

    A new rate is adopted only after the selection has asked for it
    continuously for ``policy.dwell`` seconds.
    """

    policy: AveragingPolicy = field(default_factory=AveragingPolicy)
    rate: float = None
    precision_unmet: bool = False
    low_current: bool = False
    switches: int = 0

    def __post_init__(self):
        if self.rate is None:
            self.rate = self.policy.rate_ladder[0]
        self._pending = None
        self._since = None

    def update(self, estimate: UncertaintyEstimate, t: float) -> float:
        sel = select_rate(estimate, self.policy)
        self.precision_unmet = sel.precision_unmet
        self.low_current = sel.low_current
        if sel.rate == self.rate:
            self._pending = self._since = None
        elif sel.rate != self._pending:
            self._pending, self._since = sel.rate, t
        elif t - self._since >= self.policy.dwell:
            self.rate = sel.rate
            self.switches += 1
            self._pending = self._since = None
        return self.rate
