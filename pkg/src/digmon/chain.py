"""End-to-end sensing chain: scenario -> analog front end -> ADC blocks."""

from __future__ import annotations

import numpy as np

from ._rng import spawn
from .adc import AdcConfig, AdcPipeline, ClockModel, KernelFifo, RawBlock
from .frontend import Frontend, SensorConfig
from .scenario import ScenarioSpec, ScenarioStream

__all__ = ["SensingChain", "simulate_power"]

_CHUNK = 1 << 17


class SensingChain:
    """Continuous simulation of one node's power sensing hardware.

    Randomness for the waveform, the analog noise and the clock jitter comes
    from independent children of ``seed``.
    """

    def __init__(self, spec: ScenarioSpec, sensor: SensorConfig | None = None,
                 adc: AdcConfig | None = None, clock: ClockModel | None = None,
                 seed=0, fifo: KernelFifo | None = None, t0: float = 0.0,
                 scenario_noise: bool = True):
        self.spec = spec
        self.sensor = sensor or SensorConfig()
        self.adc = adc or AdcConfig()
        self.clock = clock or ClockModel()
        s_wave, s_front, s_clock = spawn(seed, 3)
        self.stream = ScenarioStream(spec, self.adc.fs_adc, seed=s_wave, t0=t0, noise=scenario_noise)
        self.frontend = Frontend(self.sensor, self.adc.fs_adc, seed=s_front)
        self.pipeline = AdcPipeline(self.adc, self.clock, fifo=fifo, seed=s_clock, t0=t0)

    @property
    def fs(self) -> float:
        return self.adc.fs

    @property
    def time(self) -> float:
        """True time reached by the raw conversion stream (s)."""
        return self.stream.time

    def _raw_chunks(self, n_raw):
        while n_raw > 0:
            n = min(n_raw, _CHUNK)
            tr = self.stream.read(n)
            yield self.frontend.process(tr.current, tr.voltage)
            n_raw -= n

    def acquire(self, n_samples: int) -> list[RawBlock]:
        """Advance by ``n_samples`` averaged samples; return completed blocks."""
        blocks: list[RawBlock] = []
        for vi, vv in self._raw_chunks(n_samples * self.adc.avg):
            blocks.extend(self.pipeline.feed(vi, vv))
        return blocks

    def acquire_seconds(self, duration: float) -> list[RawBlock]:
        return self.acquire(int(round(duration * self.adc.fs)))

    def averaged_codes(self, n_samples: int):
        """Averaged code streams without block framing (faster for bench sweeps)."""
        out_i, out_v = [], []
        for vi, vv in self._raw_chunks(n_samples * self.adc.avg):
            ci, cv = self.pipeline.convert(vi, vv)
            out_i.append(ci)
            out_v.append(cv)
        if not out_i:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        return np.concatenate(out_i), np.concatenate(out_v)

    def samples(self, n_samples: int, model=None):
        """Calibrated samples (nominal design model unless ``model`` is given)."""
        from .calib import CalibrationModel, convert_blocks

        model = model or CalibrationModel.nominal(self.sensor, self.adc)
        return convert_blocks(self.acquire(n_samples), model, self.fs)


def simulate_power(spec: ScenarioSpec, duration: float, seed=0, model=None, **kw) -> np.ndarray:
    """Calibrated 50 kS/s power stream of ``spec`` through the default hardware."""
    chain = SensingChain(spec, seed=seed, **kw)
    return chain.samples(int(round(duration * chain.fs)), model).power
