"""Synthetic node power waveforms.

A :class:`ScenarioSpec` describes the plug power of one compute node as a
constant floor plus rectangular pulse trains (periodic bursts of work),
sinusoidal components, band-limited "activity" noise and white noise.  The
bus voltage is a constant rail with a small sinusoidal ripple, and the current
follows as ``i = p / v`` so that ``v * i`` reproduces the power exactly.

Deterministic parts are pure functions of time.  Stochastic parts are drawn
from generators seeded per component, so a fixed ``(spec, t, seed)`` always
produces the same samples.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml
from scipy import signal

from ._rng import spawn

__all__ = [
    "PulseTrain",
    "Tone",
    "NoiseBand",
    "Segment",
    "ScenarioSpec",
    "Trace",
    "ScenarioStream",
    "eval_power",
    "eval_current_voltage",
    "render_trace",
    "dummy_load",
    "load_catalog",
    "get_scenario",
    "catalog_names",
    "resolve_scenario",
]

# Pulse edges that land exactly on a sample are resolved as "low" after the
# high phase and "high" at the period start.
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class PulseTrain:
    frequency: float
    duty: float
    amplitude: float
    phase: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.duty < 1.0:
            raise ValueError(f"duty must be in (0, 1), got {self.duty}")
        if self.frequency <= 0:
            raise ValueError(f"pulse frequency must be positive, got {self.frequency}")


@dataclass(frozen=True)
class Tone:
    frequency: float
    amplitude: float
    phase: float = 0.0

    def __post_init__(self):
        if self.frequency <= 0:
            raise ValueError(f"tone frequency must be positive, got {self.frequency}")


@dataclass(frozen=True)
class NoiseBand:
    """Gaussian activity noise confined to ``[f_lo, f_hi]`` with std ``sigma`` (W)."""

    f_lo: float
    f_hi: float
    sigma: float

    def __post_init__(self):
        if not 0.0 <= self.f_lo < self.f_hi:
            raise ValueError(f"invalid band [{self.f_lo}, {self.f_hi}]")
        if self.sigma < 0:
            raise ValueError("band sigma must be non-negative")


@dataclass(frozen=True)
class Segment:
    """Time window ``[t_start, t_end)`` in which ``overrides`` replace spec fields."""

    t_start: float
    t_end: float
    overrides: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.t_start < self.t_end:
            raise ValueError(f"invalid segment [{self.t_start}, {self.t_end})")
        bad = set(self.overrides) - _OVERRIDABLE
        if bad:
            raise ValueError(f"segment cannot override {sorted(bad)}")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    baseline_power: float
    bus_voltage: float = 12.0
    pulse_trains: tuple[PulseTrain, ...] = ()
    tones: tuple[Tone, ...] = ()
    noise_sigma: float = 0.0
    bands: tuple[NoiseBand, ...] = ()
    ripple: float = 0.001
    ripple_frequency: float = 100.0
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        if self.baseline_power < 0:
            raise ValueError("baseline_power must be >= 0")
        if self.bus_voltage <= 0:
            raise ValueError("bus_voltage must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.ripple < 1.0:
            raise ValueError("ripple fraction must be in [0, 1)")
        # accept lists from config files
        for name in ("pulse_trains", "tones", "bands", "segments"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def max_frequency(self) -> float:
        """Highest fundamental or band edge present anywhere in the scenario."""
        specs = [self] + [self._segment_spec(s) for s in self.segments]
        freqs = [self.ripple_frequency if self.ripple else 0.0]
        for s in specs:
            freqs += [p.frequency for p in s.pulse_trains]
            freqs += [t.frequency for t in s.tones]
            freqs += [b.f_hi for b in s.bands]
        return max(freqs)

    def without_noise(self) -> "ScenarioSpec":
        segs = tuple(
            Segment(s.t_start, s.t_end, {k: v for k, v in s.overrides.items() if k not in ("noise_sigma", "bands")})
            for s in self.segments
        )
        return dataclasses.replace(self, noise_sigma=0.0, bands=(), segments=segs)

    def _segment_spec(self, seg: Segment) -> "ScenarioSpec":
        return dataclasses.replace(self, segments=(), **seg.overrides)


_OVERRIDABLE = {"baseline_power", "pulse_trains", "tones", "noise_sigma", "bands"}


def _deterministic_power(spec: ScenarioSpec, t: np.ndarray) -> np.ndarray:
    p = np.full(t.shape, float(spec.baseline_power))
    for pt in spec.pulse_trains:
        cycles = pt.frequency * t + pt.phase / (2 * np.pi)
        high = np.mod(cycles + _EDGE_EPS, 1.0) < pt.duty
        p += pt.amplitude * high
    for tone in spec.tones:
        p += tone.amplitude * np.sin(2 * np.pi * tone.frequency * t + tone.phase)
    return p


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be >= 0")
    return t


def _segment_masks(spec: ScenarioSpec, t: np.ndarray):
    """Yield ``(effective_spec, mask)`` pairs covering every sample once."""
    rest = np.ones(t.shape, dtype=bool)
    for seg in spec.segments:
        m = (t >= seg.t_start) & (t < seg.t_end) & rest
        rest &= ~m
        yield spec._segment_spec(seg), m
    yield dataclasses.replace(spec, segments=()), rest


class _NoiseSource:
    """Stateful generator of white and band-limited noise on a uniform grid.

    Each noise component owns an independent child generator, so draws do not
    depend on how the stream is chunked.
    """

    def __init__(self, spec: ScenarioSpec, fs: float, seed):
        self.fs = fs
        specs = [spec] + [spec._segment_spec(s) for s in spec.segments]
        self.bands = sorted({b for s in specs for b in s.bands}, key=lambda b: (b.f_lo, b.f_hi, b.sigma))
        children = spawn(seed, 1 + len(self.bands))
        self._white = np.random.default_rng(children[0])
        self._band_rngs = [np.random.default_rng(c) for c in children[1:]]
        self._filters = []
        for band in self.bands:
            sos = _band_sos(band, fs)
            gain = _sos_noise_gain(sos)
            zi = np.zeros((sos.shape[0], 2))
            self._filters.append([sos, gain, zi])

    def draw(self, n: int):
        white = self._white.standard_normal(n)
        bands = {}
        if n == 0:
            return white, {b: np.empty(0) for b in self.bands}
        for band, rng, filt in zip(self.bands, self._band_rngs, self._filters):
            sos, gain, zi = filt
            y, filt[2] = signal.sosfilt(sos, rng.standard_normal(n), zi=zi)
            bands[band] = y * (band.sigma / gain)
        return white, bands


def _band_sos(band: NoiseBand, fs: float):
    nyq = fs / 2
    hi = min(band.f_hi, 0.999 * nyq)
    if band.f_lo <= 0:
        return signal.butter(4, hi, btype="lowpass", fs=fs, output="sos")
    return signal.butter(4, [band.f_lo, hi], btype="bandpass", fs=fs, output="sos")


def _sos_noise_gain(sos) -> float:
    """RMS gain of the filter for unit white input (sqrt of impulse energy)."""
    n = 1 << 16
    imp = np.zeros(n)
    imp[0] = 1.0
    h = signal.sosfilt(sos, imp)
    return float(np.sqrt(np.sum(h * h)))


def _noise_power(spec, t, white, bands):
    out = np.zeros(t.shape)
    for eff, m in _segment_masks(spec, t):
        if not m.any():
            continue
        out[m] += eff.noise_sigma * white[m]
        for b in eff.bands:
            out[m] += bands[b][m]
    return out


def _power(spec, t, noise=None):
    p = np.empty(t.shape)
    for eff, m in _segment_masks(spec, t):
        if m.any():
            p[m] = _deterministic_power(eff, t[m])
    if noise is not None:
        p += noise
    return np.maximum(p, 0.0)


def _uniform_rate(t: np.ndarray) -> float:
    if t.size < 2:
        return 1.0
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-6, atol=0) or dt[0] <= 0:
        raise ValueError("band-limited noise needs a uniformly spaced, increasing time grid")
    return 1.0 / dt[0]


def eval_power(spec: ScenarioSpec, t, seed=None):
    """Plug power in watts at time(s) ``t``.

    ``seed=None`` evaluates the noise-free waveform.  With a seed, white noise
    is added per sample, and band noise too when ``t`` is a uniform grid.  The
    result is clamped at 0 W.
    """
    t = _check_time(t)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    noise = None
    if seed is not None:
        has_bands = any(eff.bands for eff, _ in _segment_masks(spec, t))
        src = _NoiseSource(spec, _uniform_rate(t) if has_bands else 1.0, seed)
        white, bands = src.draw(t.size)
        noise = _noise_power(spec, t, white, bands)
    p = _power(spec, t, noise)
    return float(p[0]) if scalar else p


def _voltage(spec: ScenarioSpec, t):
    return spec.bus_voltage * (1.0 + spec.ripple * np.sin(2 * np.pi * spec.ripple_frequency * t))


def eval_current_voltage(spec: ScenarioSpec, t, seed=None):
    """Return ``(current, voltage)`` with ``voltage * current == eval_power``."""
    t = _check_time(t)
    p = eval_power(spec, t, seed)
    v = _voltage(spec, t)
    return p / v, v


@dataclass
class Trace:
    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    power: np.ndarray

    def __len__(self):
        return self.t.size


class ScenarioStream:
    """Render a scenario chunk by chunk on a uniform grid at ``fs``.

    Successive :meth:`read` calls continue in time, and the concatenation of
    chunks equals a single read of the total length.
    """

    def __init__(self, spec: ScenarioSpec, fs: float, seed=0, t0: float = 0.0, noise: bool = True):
        if fs <= 0:
            raise ValueError("fs must be > 0")
        if fs <= 2 * spec.max_frequency():
            warnings.warn(
                f"fs={fs:g} Hz does not exceed twice the highest component "
                f"({spec.max_frequency():g} Hz) of scenario {spec.name!r}",
                stacklevel=2,
            )
        self.spec = spec
        self.fs = float(fs)
        self.t0 = float(t0)
        self.index = 0
        self._noise = _NoiseSource(spec, fs, seed) if noise else None

    @property
    def time(self) -> float:
        return self.t0 + self.index / self.fs

    def read(self, n: int) -> Trace:
        t = self.t0 + (self.index + np.arange(n)) / self.fs
        self.index += n
        noise = None
        if self._noise is not None:
            white, bands = self._noise.draw(n)
            noise = _noise_power(self.spec, t, white, bands)
        p = _power(self.spec, t, noise)
        v = _voltage(self.spec, t)
        return Trace(t, p / v, v, p)


def render_trace(spec: ScenarioSpec, fs: float, duration: float, seed=0) -> Trace:
    """Sample ``round(fs * duration)`` points of current, voltage and power."""
    if fs <= 0:
        raise ValueError("fs must be > 0")
    if duration < 0:
        raise ValueError("duration must be >= 0")
    n = int(round(fs * duration))
    return ScenarioStream(spec, fs, seed).read(n)


def dummy_load(power: float, bus_voltage: float = 12.0, ripple: float = 0.0, name=None) -> ScenarioSpec:
    """Constant-power bench load, as used for calibration and precision runs."""
    return ScenarioSpec(name or f"dummy_{power:g}W", baseline_power=power, bus_voltage=bus_voltage, ripple=ripple)


# -- catalog -----------------------------------------------------------------

_LIST_TYPES = {"pulse_trains": PulseTrain, "tones": Tone, "bands": NoiseBand}


def _build_items(key, items):
    cls = _LIST_TYPES[key]
    return tuple(cls(**dict(it)) for it in items or ())


def _spec_from_mapping(name: str, raw: Mapping[str, Any], library: Mapping[str, Mapping]) -> ScenarioSpec:
    raw = dict(raw)
    kwargs: dict[str, Any] = {}
    # `include` pulls list components from named fragments, e.g. shared idle tones
    for frag in raw.pop("include", []) or []:
        for key, items in library[frag].items():
            kwargs[key] = kwargs.get(key, ()) + _build_items(key, items)
    for key in _LIST_TYPES:
        if key in raw:
            kwargs[key] = kwargs.get(key, ()) + _build_items(key, raw.pop(key))
    segs = []
    for seg in raw.pop("segments", []) or []:
        seg = dict(seg)
        overrides = {}
        for k, v in (seg.get("overrides") or {}).items():
            overrides[k] = _build_items(k, v) if k in _LIST_TYPES else v
        segs.append(Segment(float(seg["t_start"]), float(seg["t_end"]), overrides))
    raw.pop("description", None)
    return ScenarioSpec(name=name, segments=tuple(segs), **kwargs, **raw)


def load_catalog(path: str | Path | None = None) -> dict[str, ScenarioSpec]:
    """Load scenario presets from a YAML catalog (the bundled one by default)."""
    if path is None:
        text = resources.files("digmon").joinpath("data/catalog.yaml").read_text()
    else:
        text = Path(path).read_text()
    doc = yaml.safe_load(text) or {}
    library = doc.get("fragments", {}) or {}
    return {name: _spec_from_mapping(name, raw, library) for name, raw in (doc.get("scenarios") or {}).items()}


_CATALOG: dict[str, ScenarioSpec] | None = None


def _catalog() -> dict[str, ScenarioSpec]:
    global _CATALOG
    if _CATALOG is None:
        _CATALOG = load_catalog()
    return _CATALOG


def get_scenario(name: str) -> ScenarioSpec:
    cat = _catalog()
    try:
        return cat[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {', '.join(sorted(cat))}") from None


def catalog_names() -> list[str]:
    return sorted(_catalog())


def resolve_scenario(ref) -> ScenarioSpec:
    """A spec, a catalog name, ``file.yaml`` (single scenario) or ``file.yaml:name``."""
    if isinstance(ref, ScenarioSpec):
        return ref
    ref = str(ref)
    path, _, name = ref.partition(":") if ref.count(":") == 1 and not Path(ref).exists() else (ref, "", "")
    if path.endswith((".yaml", ".yml")) or Path(path).is_file():
        cat = load_catalog(path)
        if name:
            return cat[name]
        if len(cat) != 1:
            raise ValueError(f"{path} defines {len(cat)} scenarios; use {path}:<name>")
        return next(iter(cat.values()))
    return get_scenario(ref)
