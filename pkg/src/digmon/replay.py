"""Multi-rack deployment at accelerated time.

One broker and one collector per rack, ``nodes_per_rack`` agents per
broker, all hosted in this process.  Agents advance in lock-step 100 ms
simulated ticks as fast as the host allows.  Afterwards the store is
checked against what the agents published: the exact multiset of stored
records and per-second energy consistency between the 1 ms and 1 s streams.
"""

from __future__ import annotations

import hashlib
import tempfile
import time
from collections import Counter
from pathlib import Path

import numpy as np

from ._rng import spawn
from .agent import Agent, AgentConfig
from .calib import calibrate
from .collector import Collector, Kind, list_topics, query_scalar, read_topic
from .frontend import SensorConfig
from .transport.broker import BrokerThread
from .transport.client import Client
from .transport.payload import SAMPLE
from .transport.topics import TopicFilter

__all__ = ["replay", "conservation_error", "DEFAULT_MIX"]

DEFAULT_MIX = ("idle", "mem_bound", "cpu_bound", "qe_like", "static_tick", "scan_phase_a", "scan_phase_b")
STORE_FILTERS = ("+/+/+/pwr/#",)


class _Tap:
    """Sink wrapper remembering every publication that a store filter matches."""

    def __init__(self, inner, filters):
        self.inner = inner
        self.filters = [TopicFilter(f) for f in filters]
        self.seen = Counter()
        self._match: dict[str, bool] = {}

    def _keep(self, items):
        for topic, payload in items:
            m = self._match.get(topic)
            if m is None:
                m = self._match[topic] = any(f.matches(topic) for f in self.filters)
            if m:
                self.seen[(topic, hashlib.blake2b(payload, digest_size=16).digest())] += 1

    def publish_many(self, items):
        items = list(items)
        self.inner.publish_many(items)
        self._keep(items)

    def publish(self, topic, payload):
        self.publish_many([(topic, payload)])


def conservation_error(fine_t, fine_v, coarse_t, coarse_v, fine_period=1e-3, coarse_period=1.0):
    """Largest relative mismatch between each coarse sample and the fine samples it spans."""
    fine_t = np.asarray(fine_t, dtype=np.int64)
    coarse_t = np.asarray(coarse_t, dtype=np.int64)
    per = int(round(coarse_period / fine_period))
    if coarse_t.size == 0:
        return float("nan")
    worst = 0.0
    order = np.argsort(fine_t, kind="stable")
    fine_t, fine_v = fine_t[order], np.asarray(fine_v)[order]
    # the coarse stamp is the member-mean time; members lie within half a period
    half = int(coarse_period * 5e8)
    for tc, vc in zip(coarse_t, coarse_v):
        lo = np.searchsorted(fine_t, tc - half)
        hi = np.searchsorted(fine_t, tc + half)
        if hi - lo != per:
            return float("inf")
        energy_fine = fine_v[lo:hi].sum() * fine_period
        worst = max(worst, abs(energy_fine - vc * coarse_period) / abs(vc * coarse_period))
    return worst


def replay(racks: int = 3, nodes_per_rack: int = 15, duration: float = 2.0, root=None, seed: int = 0,
           scenarios=None, filters=STORE_FILTERS, drain_timeout: float = 60.0) -> dict:
    mix = list(scenarios or DEFAULT_MIX)
    tmp = None
    if root is None:
        tmp = tempfile.TemporaryDirectory(prefix="dig-replay-")
        root = tmp.name
    root = Path(root)
    t_start = time.perf_counter()
    model = calibrate(SensorConfig(), seed=seed)
    brokers, collectors, clients, agents, taps = [], [], [], [], []
    seeds = spawn(seed, racks * nodes_per_rack)
    collectors_open = True
    try:
        for r in range(racks):
            bt = BrokerThread().start()
            brokers.append(bt)
            col = Collector(root, filters, port=bt.port, client_id=f"collector-rack{r}").start()
            collectors.append(col)
            for i in range(nodes_per_rack):
                n = r * nodes_per_rack + i
                cfg = AgentConfig(node_id=f"node{n:02d}", scenario=mix[n % len(mix)], org="davide",
                                  cluster=f"rack{r}", broker_port=bt.port, seed=int(seeds[n].generate_state(1)[0]))
                cl = Client(port=bt.port, client_id=cfg.node_id).connect()
                clients.append(cl)
                tap = _Tap(cl, filters)
                taps.append(tap)
                agents.append(Agent(cfg, tap, calibration=model))
        t_sim = time.perf_counter()
        n_ticks = int(round(duration / agents[0].cfg.step))
        for _ in range(n_ticks):
            for ag in agents:
                ag.step()
        sim_elapsed = time.perf_counter() - t_sim
        expected = sum((sum(t.seen.values()) for t in taps), 0)
        deadline = time.perf_counter() + drain_timeout
        while sum(c.stats.received for c in collectors) < expected and time.perf_counter() < deadline:
            time.sleep(0.05)
        for c in collectors:
            c.drain(drain_timeout)
        for c in collectors:
            c.close()
        collectors_open = False
        dropped = sum(c.stats.dropped for c in collectors)
        # round trip: the store must hold exactly what was published
        published = Counter()
        for t in taps:
            published.update(t.seen)
        stored = Counter()
        for topic in list_topics(root):
            kind, tt, vals = read_topic(root, topic)
            if kind == Kind.SCALAR:
                raw = [SAMPLE.pack(int(a), float(b)) for a, b in zip(tt, vals)]
            else:
                raw = vals
            for p in raw:
                stored[(topic, hashlib.blake2b(bytes(p), digest_size=16).digest())] += 1
        worst = 0.0
        for ag in agents:
            ft, fv = query_scalar(root, ag.topic("pwr", "avg1ms"))
            ct, cv = query_scalar(root, ag.topic("pwr", "avg1s"))
            worst = max(worst, conservation_error(ft, fv, ct, cv))
    finally:
        if collectors_open:
            for c in collectors:
                c.close()
        for cl in clients:
            cl.close()
        for bt in brokers:
            bt.stop()
    summary = {
        "racks": racks,
        "nodes": len(agents),
        "duration_s": duration,
        "published": expected,
        "stored": sum(stored.values()),
        "collector_dropped": dropped,
        "multiset_equal": stored == published,
        "max_conservation_error": worst,
        "topics": len({k[0] for k in stored}),
        "sim_elapsed_s": round(sim_elapsed, 3),
        "speedup": round(duration * len(agents) / sim_elapsed, 3) if sim_elapsed > 0 else None,
        "root": None if tmp else str(root),
        "elapsed_s_total": round(time.perf_counter() - t_start, 3),
    }
    if tmp is not None:
        tmp.cleanup()
    return summary
