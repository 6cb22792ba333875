"""Per-node edge agent.

Runs the simulated sensing chain in simulated time, converts blocks to
watts, derives the 1 ms and 1 s streams from the same full-rate stream,
keeps the rate controller, snapshots 40 ms spectrograms, emulates the
out-of-band counter sources and publishes everything through a sink
(a broker client or an in-memory recorder).
"""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ._rng import spawn
from .adc import AdcConfig, ClockModel, KernelFifo, KernelFifoOverflow, NS
from .calib import CalibrationModel, calibrate, convert_blocks
from .chain import SensingChain
from .frontend import SensorConfig
from .metrology import AveragingPolicy, RateController, estimate_noise
from .scenario import ScenarioSpec, resolve_scenario
from .spectral.centroid import CentroidModel, classify
from .spectral.psd import compute_psd, window_length
from .spectral.record import serialize_record
from .transport.payload import SAMPLE

__all__ = [
    "NotReady",
    "AgentConfig",
    "CounterSource",
    "MemorySink",
    "Agent",
    "amester_metric_names",
    "ipmi_metric_names",
    "DEFAULT_EPOCH_NS",
]

log = logging.getLogger(__name__)

# a fixed epoch keeps seeded runs bit-identical; real-time runs may pass "now"
DEFAULT_EPOCH_NS = 1_700_000_000 * NS


class NotReady(RuntimeError):
    pass


def amester_metric_names() -> list[str]:
    """242 OCC-style metrics: 10 per core on 2 sockets x 12 cores, plus 2 node totals."""
    per_core = ["temp", "freq", "util", "power", "ipc", "l2_miss", "l3_miss", "stall", "volt", "throttle"]
    names = [f"p{s}_core{c:02d}_{q}" for s in range(2) for c in range(12) for q in per_core]
    return names + ["node_power", "node_energy"]


def ipmi_metric_names() -> list[str]:
    """89 BMC-style sensors."""
    names = [f"fan{i}_rpm" for i in range(8)]
    names += [f"temp_{z}{i}" for z in ("cpu", "dimm", "vrm", "inlet", "exhaust") for i in range(8)]
    names += [f"volt_rail{i}" for i in range(20)]
    names += [f"curr_rail{i}" for i in range(10)]
    names += [f"psu{i}_{q}" for i in range(2) for q in ("in_power", "out_power", "temp", "status", "fan")]
    names += ["chassis_power"]
    return names


@dataclass(frozen=True)
class CounterSpec:
    name: str
    n_metrics: int
    period: float

    def __post_init__(self):
        if self.n_metrics < 1 or self.period <= 0:
            raise ValueError("counter source needs n_metrics >= 1 and period > 0")


def _default_counters():
    return (CounterSpec("occ", 242, 10.0), CounterSpec("ipmi", 89, 5.0))


@dataclass
class AgentConfig:
    node_id: str = "node00"
    scenario: object = "idle"
    org: str = "org"
    cluster: str = "cluster"
    topic_prefix: str | None = None
    sensor: SensorConfig = field(default_factory=SensorConfig)
    adc: AdcConfig = field(default_factory=AdcConfig)
    clock: ClockModel = field(default_factory=ClockModel)
    policy: AveragingPolicy = field(default_factory=AveragingPolicy)
    broker_host: str = "127.0.0.1"
    broker_port: int = 1883
    calibration: str | None = None
    calib_dwell: float = 1.0
    centroids: str | None = None
    counters: tuple = field(default_factory=_default_counters)
    coarse_period: float = 1.0
    fine_period: float = 0.001
    psd_period: float = 1.0
    health_period: float = 1.0
    outbox_seconds: float = 10.0
    step: float = 0.1
    seed: int = 0
    epoch_ns: int = DEFAULT_EPOCH_NS

    def __post_init__(self):
        if not self.node_id or "/" in self.node_id or "+" in self.node_id or "#" in self.node_id:
            raise ValueError("node_id must be a single topic level")
        if self.topic_prefix is None:
            self.topic_prefix = f"{self.org}/{self.cluster}/{self.node_id}"
        fs = self.adc.fs
        for name in ("fine_period", "coarse_period"):
            m = getattr(self, name) * fs
            if m < 1 or abs(m - round(m)) > 1e-9:
                raise ValueError(f"{name} must be a whole number of samples at {fs} Hz")
        if round(self.coarse_period * fs) % round(self.fine_period * fs):
            raise ValueError("coarse_period must be a multiple of fine_period")
        if self.step <= 0 or abs(self.step * fs - round(self.step * fs)) > 1e-9:
            raise ValueError("step must be a whole number of samples")
        self.counters = tuple(c if isinstance(c, CounterSpec) else CounterSpec(**c) for c in self.counters)

    @property
    def fine_factor(self) -> int:
        return int(round(self.fine_period * self.adc.fs))

    @property
    def coarse_factor(self) -> int:
        return int(round(self.coarse_period * self.adc.fs))

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        d = dict(d)
        sub = {"sensor": SensorConfig, "adc": AdcConfig, "clock": ClockModel, "policy": AveragingPolicy}
        for key, typ in sub.items():
            if isinstance(d.get(key), dict):
                d[key] = typ(**d[key])
        if "counters" in d and isinstance(d["counters"], dict):
            d["counters"] = tuple(CounterSpec(name=k, **v) for k, v in d["counters"].items())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown agent config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, **overrides) -> "AgentConfig":
        doc = yaml.safe_load(Path(path).read_text()) or {}
        doc = doc.get("agent", doc)
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc)


class CounterSource:
    """Deterministic synthetic counters: slow random walks plus a load term."""

    def __init__(self, spec: CounterSpec, names, seed):
        if len(names) != spec.n_metrics:
            names = [f"metric{i:03d}" for i in range(spec.n_metrics)]
        self.spec = spec
        self.names = list(names)
        rng = np.random.default_rng(seed)
        n = spec.n_metrics
        self._rng = rng
        self.base = rng.uniform(10.0, 100.0, n)
        self.load_gain = rng.uniform(0.0, 0.05, n)
        self.step_sigma = rng.uniform(0.01, 0.5, n)
        self.walk = np.zeros(n)
        self.next_t = spec.period
        self.emitted = 0

    def due(self, t: float) -> bool:
        return t + 1e-9 >= self.next_t

    def sample(self, load_w: float) -> np.ndarray:
        self.walk += self._rng.normal(0.0, 1.0, self.walk.size) * self.step_sigma
        self.emitted += 1
        return self.base + self.load_gain * load_w + self.walk


class MemorySink:
    """Records publications per topic (tests and in-process pipelines)."""

    def __init__(self):
        self.messages: dict[str, list] = {}
        self.count = 0

    def publish(self, topic: str, payload: bytes):
        self.messages.setdefault(topic, []).append(bytes(payload))
        self.count += 1

    def publish_many(self, items):
        for t, p in items:
            self.publish(t, p)

    def samples(self, topic: str):
        """``(t_ns, value)`` arrays of a scalar topic."""
        rows = [SAMPLE.unpack(p) for p in self.messages.get(topic, [])]
        if not rows:
            return np.empty(0, np.uint64), np.empty(0)
        t, v = zip(*rows)
        return np.array(t, dtype=np.uint64), np.array(v, dtype=float)

    def topics(self, prefix: str = "") -> list[str]:
        return sorted(t for t in self.messages if t.startswith(prefix))


@functools.lru_cache(maxsize=16)
def _auto_calibration(sensor: SensorConfig, adc: AdcConfig, dwell: float, seed: int) -> CalibrationModel:
    return calibrate(sensor, adc, dwell=dwell, seed=seed)


class _Averager:
    """Block means of M samples across chunk boundaries."""

    def __init__(self, m: int):
        self.m = m
        self._v = np.empty(0)
        self._t = np.empty(0, np.int64)

    def push(self, v, t):
        v = np.concatenate([self._v, v])
        t = np.concatenate([self._t, t])
        n = v.size // self.m
        cut = n * self.m
        self._v, self._t = v[cut:], t[cut:]
        if n == 0:
            return np.empty(0), np.empty(0, np.int64)
        vv = v[:cut].reshape(n, self.m).mean(axis=1)
        tt = t[:cut].reshape(n, self.m)
        base = tt[:, :1]
        return vv, base[:, 0] + (tt - base).sum(axis=1) // self.m


class Agent:
    def __init__(self, config: AgentConfig, sink=None, calibration: CalibrationModel | None = None,
                 centroids: CentroidModel | None = None, fifo: KernelFifo | None = None):
        self.cfg = config
        self.sink = sink if sink is not None else MemorySink()
        self.spec: ScenarioSpec = resolve_scenario(config.scenario)
        s_chain, s_cnt = spawn(config.seed, 2)
        if calibration is None:
            if config.calibration:
                calibration = CalibrationModel.load(config.calibration)
            else:
                calibration = _auto_calibration(config.sensor, config.adc, config.calib_dwell, config.seed)
        self.calibration = calibration
        if centroids is None and config.centroids:
            centroids = CentroidModel.load(config.centroids)
        self.centroids = centroids
        self.fifo = fifo if fifo is not None else KernelFifo(config.adc.kernel_fifo_capacity)
        self.chain = SensingChain(self.spec, config.sensor, config.adc, config.clock, seed=s_chain, fifo=self.fifo)
        self.fs = config.adc.fs
        self.prefix = config.topic_prefix
        self.t = 0.0  # simulated seconds processed
        self._fine = _Averager(config.fine_factor)
        self._coarse = _Averager(config.coarse_factor)
        self._noise_i = deque()
        self._noise_v = deque()
        self._win = window_length(self.fs)
        self._buf_p = np.empty(0)
        self._buf_t = np.empty(0, np.int64)
        names = {"occ": amester_metric_names(), "ipmi": ipmi_metric_names()}
        seeds = spawn(s_cnt, len(config.counters))
        self.counters = [CounterSource(c, names.get(c.name, []), sd) for c, sd in zip(config.counters, seeds)]
        self.controller = RateController(config.policy)
        self.sigma_p = float("nan")
        self.samples_total = 0
        self.blocks_total = 0
        self.fifo_overflow_events = 0
        self.blocks_dropped = 0
        self.outbox: deque = deque()
        self.outbox_limit = int(config.outbox_seconds * (1.0 / config.fine_period) * 1.2) + 64
        self.outbox_dropped = 0
        self.published = 0
        self.psd_windows = 0
        self.last_class = None
        self.stage_seconds = {"acquire": 0.0, "convert": 0.0, "downsample": 0.0, "analytics": 0.0, "publish": 0.0}
        self._next_psd = config.psd_period
        self._next_health = config.health_period
        self._last_power = self.spec.baseline_power
        self._pending_events: list[str] = []

    # topics
    def topic(self, *parts) -> str:
        return "/".join((self.prefix,) + parts)

    def _ns(self, local_ns):
        return int(self.cfg.epoch_ns + int(local_ns))

    # publishing with an outbox for broker outages
    def _emit(self, items):
        if not items:
            return
        t0 = time.perf_counter()
        if self.outbox:
            self.outbox.extend(items)
            items = []
            self._overflow_outbox()
            items = list(self.outbox)
            self.outbox.clear()
        try:
            if hasattr(self.sink, "publish_many"):
                self.sink.publish_many(items)
            else:
                for tp, pl in items:
                    self.sink.publish(tp, pl)
            self.published += len(items)
        except (ConnectionError, OSError):
            self.outbox.extend(items)
            self._overflow_outbox()
        self.stage_seconds["publish"] += time.perf_counter() - t0

    def _overflow_outbox(self):
        extra = len(self.outbox) - self.outbox_limit
        for _ in range(max(extra, 0)):
            self.outbox.popleft()
            self.outbox_dropped += 1

    # pipeline
    def step(self, duration: float | None = None):
        """Advance simulated time by ``duration`` (default one configured step)."""
        duration = self.cfg.step if duration is None else duration
        n_total = int(round(duration * self.fs))
        n_step = int(round(self.cfg.step * self.fs))
        while n_total > 0:
            n = min(n_total, n_step)
            self._process(n)
            n_total -= n

    def run(self, duration: float, realtime: bool = False, speed: float = 1.0):
        t_wall = time.perf_counter()
        t_sim0 = self.t
        end = self.t + duration
        while self.t < end - 1e-12:
            self.step(min(self.cfg.step, end - self.t))
            if realtime:
                ahead = (self.t - t_sim0) / speed - (time.perf_counter() - t_wall)
                if ahead > 0:
                    time.sleep(ahead)
        return self

    def _process(self, n: int):
        c = time.perf_counter()
        self.chain.acquire(n)
        try:
            blocks = self.fifo.drain()
        except KernelFifoOverflow as exc:
            blocks = exc.blocks
            self.fifo_overflow_events += 1
            self.blocks_dropped += exc.dropped
            self._pending_events.append(f"adc_overflow:{exc.dropped}")
        self.blocks_total += len(blocks)
        c1 = time.perf_counter()
        s = convert_blocks(blocks, self.calibration, self.fs)
        self.samples_total += len(s)
        c2 = time.perf_counter()
        self.stage_seconds["acquire"] += c1 - c
        self.stage_seconds["convert"] += c2 - c1
        self.t += n / self.fs
        out = []
        fine_v, fine_t = self._fine.push(s.power, s.t)
        ftopic = self.topic("pwr", "avg1ms")
        out.extend((ftopic, SAMPLE.pack(self._ns(t), v)) for t, v in zip(fine_t.tolist(), fine_v.tolist()))
        coarse_v, coarse_t = self._coarse.push(s.power, s.t)
        ctopic = self.topic("pwr", "avg1s")
        out.extend((ctopic, SAMPLE.pack(self._ns(t), v)) for t, v in zip(coarse_t.tolist(), coarse_v.tolist()))
        if coarse_v.size:
            self._last_power = float(coarse_v[-1])
        self._buf_p = np.concatenate([self._buf_p, s.power])[-self._win:]
        self._buf_t = np.concatenate([self._buf_t, s.t])[-self._win:]
        c3 = time.perf_counter()
        self.stage_seconds["downsample"] += c3 - c2
        self._metrology(s, out)
        self._counters(out)
        while self.t + 1e-9 >= self._next_psd:
            self._next_psd += self.cfg.psd_period
            try:
                out.extend(self._psd_messages())
            except NotReady:
                pass
        while self.t + 1e-9 >= self._next_health:
            self._next_health += self.cfg.health_period
            out.append((self.topic("$health"), json.dumps(self.health()).encode()))
        self.stage_seconds["analytics"] += time.perf_counter() - c3
        self._emit(out)

    def _metrology(self, s, out):
        self._noise_i.append(s.current)
        self._noise_v.append(s.voltage)
        have = sum(a.size for a in self._noise_i)
        if have < self.cfg.coarse_factor:
            return
        i = np.concatenate(self._noise_i)
        v = np.concatenate(self._noise_v)
        m = self.cfg.coarse_factor
        self._noise_i = deque([i[m:]]) if i.size > m else deque()
        self._noise_v = deque([v[m:]]) if v.size > m else deque()
        est = estimate_noise(i[:m], v[:m], self.fs)
        self.sigma_p = est.sigma_p
        rate = self.controller.update(est, self.t)
        t_ns = self._ns(s.t[-1]) if len(s) else self._ns(self.t * NS)
        out.append((self.topic("pwr", "sigma"), SAMPLE.pack(t_ns, est.sigma_p)))
        out.append((self.topic("pwr", "rate"), SAMPLE.pack(t_ns, rate)))
        out.append((self.topic("pwr", "precision_unmet"), SAMPLE.pack(t_ns, float(self.controller.precision_unmet))))

    def _counters(self, out):
        for src in self.counters:
            while src.due(self.t):
                t_ns = self._ns(src.next_t * NS)
                src.next_t += src.spec.period
                vals = src.sample(self._last_power)
                out.extend((self.topic(src.spec.name, name), SAMPLE.pack(t_ns, float(x)))
                           for name, x in zip(src.names, vals))

    def emit_counters(self, source_name: str):
        """One publication round of a counter source, returned as ``(topic, value)`` pairs."""
        src = next(c for c in self.counters if c.spec.name == source_name)
        vals = src.sample(self._last_power)
        return [(self.topic(src.spec.name, n), float(x)) for n, x in zip(src.names, vals)]

    # spectrogram and classification
    def snapshot_psd(self) -> bytes:
        if self._buf_p.size < self._win:
            raise NotReady(f"need {self._win} samples for a PSD window, have {self._buf_p.size}")
        psd = compute_psd(self._buf_p, self.fs, window_id=self.psd_windows, t_start=self._ns(self._buf_t[0]))
        self.psd_windows += 1
        self._last_psd = psd
        return serialize_record(psd)

    def _psd_messages(self):
        rec = self.snapshot_psd()
        msgs = [(self.topic("pwr", "psd"), rec)]
        if self.centroids is not None:
            label, margin = classify(self._last_psd, self.centroids)
            self.last_class = (label, margin)
            body = {"t_ns": int(self._last_psd.t_start), "label": label,
                    "margin": margin if np.isfinite(margin) else None}
            msgs.append((self.topic("pwr", "class"), json.dumps(body).encode()))
        return msgs

    def health(self) -> dict:
        events, self._pending_events = self._pending_events, []
        return {
            "t_ns": self._ns(self.t * NS),
            "node_id": self.cfg.node_id,
            "sim_time_s": round(self.t, 6),
            "samples": self.samples_total,
            "blocks": self.blocks_total,
            "fifo_overflow_events": self.fifo_overflow_events,
            "blocks_dropped": self.blocks_dropped,
            "saturation": self.chain.frontend.saturation.count,
            "published": self.published,
            "outbox_pending": len(self.outbox),
            "outbox_dropped": self.outbox_dropped,
            "sigma_p_w": None if not np.isfinite(self.sigma_p) else self.sigma_p,
            "rate_hz": self.controller.rate,
            "precision_unmet": bool(self.controller.precision_unmet),
            "low_current": bool(self.controller.low_current),
            "stage_seconds": {k: round(v, 6) for k, v in self.stage_seconds.items()},
            "events": events,
        }


def agent_run(config: AgentConfig, duration: float, realtime: bool = False, connect: bool = True) -> dict:
    """Run one agent against its configured broker; returns the final health record."""
    sink = None
    client = None
    if connect:
        from .transport.client import Client

        client = Client(config.broker_host, config.broker_port, client_id=config.node_id).connect()
        sink = client
    agent = Agent(config, sink)
    try:
        agent.run(duration, realtime=realtime)
    finally:
        if client is not None:
            client.close()
    return agent.health()
