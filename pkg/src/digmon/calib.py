"""Linear calibration of the current and voltage channels.

The bench procedure holds a constant dummy load at a grid of set points,
averages the ADC codes for a dwell time at each one, and fits
``physical = gain * code + offset`` per channel by ordinary least squares.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._rng import spawn
from .adc import AdcConfig, ClockModel, RawBlock, derive_timestamps
from .chain import SensingChain
from .frontend import SensorConfig
from .scenario import dummy_load

__all__ = [
    "CalibrationError",
    "InsufficientDataError",
    "SingularFitError",
    "LinearFit",
    "CalibrationModel",
    "CalibratedSamples",
    "fit_linear",
    "convert",
    "convert_blocks",
    "sweep_channel",
    "calibrate",
]


class CalibrationError(ValueError):
    pass


class InsufficientDataError(CalibrationError):
    pass


class SingularFitError(CalibrationError):
    pass


@dataclass(frozen=True)
class LinearFit:
    gain: float
    offset: float
    r2: float
    residual_sigma: float
    gain_stderr: float
    n: int

    def __iter__(self):
        # unpacks as (gain, offset, r2, residual_sigma)
        return iter((self.gain, self.offset, self.r2, self.residual_sigma))


def fit_linear(points: Iterable[Sequence[float]]) -> LinearFit:
    """OLS line through ``(code, reference)`` points."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise InsufficientDataError("need at least 3 (code, reference) points")
    x, y = pts[:, 0], pts[:, 1]
    n = x.size
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx <= 1e-12 * max(1.0, np.sum(x * x)):
        raise SingularFitError("codes have no spread; the line is undetermined")
    gain = float(np.sum((x - xm) * (y - ym)) / sxx)
    offset = float(ym - gain * xm)
    resid = y - (gain * x + offset)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - ym) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    sigma = math.sqrt(ss_res / (n - 2)) if n > 2 else 0.0
    return LinearFit(gain, offset, min(max(r2, 0.0), 1.0), sigma, sigma / math.sqrt(sxx), n)


@dataclass(frozen=True)
class CalibrationModel:
    gain_i: float
    offset_i: float
    gain_v: float
    offset_v: float
    r2_i: float = 1.0
    r2_v: float = 1.0
    n_points: int = 0
    residual_sigma_i: float = 0.0
    residual_sigma_v: float = 0.0
    sensor_kind: str = "hall_effect"
    fit_date: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def __post_init__(self):
        if self.gain_i <= 0 or self.gain_v <= 0:
            raise CalibrationError("channel gains must be positive")
        if not (0 <= self.r2_i <= 1 and 0 <= self.r2_v <= 1):
            raise CalibrationError("r2 must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "CalibrationModel":
        return cls(1.0, 0.0, 1.0, 0.0, sensor_kind="identity")

    @classmethod
    def nominal(cls, sensor: SensorConfig, adc: AdcConfig) -> "CalibrationModel":
        """Model from design values alone (no bench fit)."""
        return cls(
            gain_i=adc.lsb / sensor.current_gain,
            offset_i=0.5 * adc.lsb / sensor.current_gain,
            gain_v=adc.lsb / sensor.divider_ratio,
            offset_v=0.5 * adc.lsb / sensor.divider_ratio,
            sensor_kind=sensor.transducer_kind.value,
        )

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationModel":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class CalibratedSamples:
    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    power: np.ndarray

    def __len__(self):
        return self.t.size


def convert(block: RawBlock, model: CalibrationModel, fs: float) -> CalibratedSamples:
    i = model.gain_i * np.asarray(block.codes_i, dtype=float) + model.offset_i
    v = model.gain_v * np.asarray(block.codes_v, dtype=float) + model.offset_v
    return CalibratedSamples(derive_timestamps(block, fs), i, v, v * i)


def convert_blocks(blocks: Sequence[RawBlock], model: CalibrationModel, fs: float) -> CalibratedSamples:
    """Vectorised :func:`convert` over consecutive blocks."""
    if not blocks:
        e = np.empty(0)
        return CalibratedSamples(np.empty(0, np.int64), e, e.copy(), e.copy())
    ci = np.concatenate([b.codes_i for b in blocks]).astype(float)
    cv = np.concatenate([b.codes_v for b in blocks]).astype(float)
    t = np.concatenate([derive_timestamps(b, fs) for b in blocks])
    i = model.gain_i * ci + model.offset_i
    v = model.gain_v * cv + model.offset_v
    return CalibratedSamples(t, i, v, v * i)


def _grid(full_range: float, steps: int, zero_exclusion: float) -> np.ndarray:
    g = np.linspace(0.0, full_range, steps)
    return g[g >= zero_exclusion * full_range]


def sweep_channel(channel: str, sensor: SensorConfig, adc: AdcConfig | None = None,
                  steps: int = 11, dwell: float = 1.0, zero_exclusion: float = 0.02,
                  hold_current: float = 10.0, bus_voltage: float = 12.0, seed=0):
    """Bench sweep of one channel; returns ``(code, reference)`` pairs.

    Each set point runs the full chain for ``dwell`` seconds on a ripple-free
    dummy load and averages the codes.  The reference is the exact set value.
    """
    adc = adc or AdcConfig()
    n = max(1, int(round(dwell * adc.fs)))
    seeds = spawn(seed, steps)
    if channel == "current":
        grid = _grid(sensor.current_range, steps, zero_exclusion)
    elif channel == "voltage":
        grid = _grid(sensor.voltage_range, steps, zero_exclusion)
    else:
        raise ValueError("channel must be 'current' or 'voltage'")
    points = []
    for k, ref in enumerate(grid):
        if channel == "current":
            load = dummy_load(bus_voltage * ref, bus_voltage, ripple=0.0)
        else:
            load = dummy_load(ref * hold_current, ref, ripple=0.0)
        chain = SensingChain(load, sensor, adc, ClockModel.ideal(), seed=seeds[k])
        ci, cv = chain.averaged_codes(n)
        code = ci.mean() if channel == "current" else cv.mean()
        points.append((float(code), float(ref)))
    return points


def calibrate(sensor: SensorConfig | None = None, adc: AdcConfig | None = None,
              steps: int = 11, dwell: float = 1.0, zero_exclusion: float = 0.02, seed=0) -> CalibrationModel:
    """Run both channel sweeps and fit the model."""
    sensor = sensor or SensorConfig()
    adc = adc or AdcConfig()
    s_i, s_v = spawn(seed, 2)
    pi = sweep_channel("current", sensor, adc, steps, dwell, zero_exclusion, seed=s_i)
    pv = sweep_channel("voltage", sensor, adc, steps, dwell, zero_exclusion, seed=s_v)
    fi, fv = fit_linear(pi), fit_linear(pv)
    return CalibrationModel(
        gain_i=fi.gain, offset_i=fi.offset, gain_v=fv.gain, offset_v=fv.offset,
        r2_i=fi.r2, r2_v=fv.r2, n_points=fi.n + fv.n,
        residual_sigma_i=fi.residual_sigma, residual_sigma_v=fv.residual_sigma,
        sensor_kind=sensor.transducer_kind.value,
    )
