import json

import numpy as np
import pytest

from digmon.adc import KernelFifo
from digmon.agent import (
    Agent,
    AgentConfig,
    CounterSpec,
    MemorySink,
    NotReady,
    amester_metric_names,
    ipmi_metric_names,
)
from digmon.scenario import get_scenario, render_trace
from digmon.spectral import CORPUS_CLASSES
from digmon.spectral.centroid import train_centroids
from digmon.spectral.record import RECORD_SIZE, deserialize_record

NS = 1_000_000_000


@pytest.fixture(scope="module")
def minute():
    cfg = AgentConfig(node_id="node01", scenario="mem_bound", seed=3)
    sink = MemorySink()
    ag = Agent(cfg, sink)
    ag.run(60.0)
    return ag, sink


def test_stream_counts(minute):
    ag, sink = minute
    p = ag.topic
    assert len(sink.messages[p("pwr", "avg1ms")]) == 60_000
    assert len(sink.messages[p("pwr", "avg1s")]) == 60
    assert len(sink.messages[p("pwr", "psd")]) == 60
    assert len(sink.messages[p("$health")]) == 60
    assert len(sink.messages[p("pwr", "sigma")]) == 60


def test_counter_sources(minute):
    ag, sink = minute
    occ = sink.topics(ag.topic("occ") + "/")
    ipmi = sink.topics(ag.topic("ipmi") + "/")
    assert len(occ) == 242 == len(amester_metric_names())
    assert len(ipmi) == 89 == len(ipmi_metric_names())
    assert {len(sink.messages[t]) for t in occ} == {6}
    assert {len(sink.messages[t]) for t in ipmi} == {12}
    t, _ = sink.samples(occ[0])
    assert list(t - ag.cfg.epoch_ns) == [k * 10 * NS for k in range(1, 7)]


def test_topic_prefix(minute):
    ag, sink = minute
    assert ag.prefix == "davide/cluster/node01" or ag.prefix.endswith("/node01")
    assert all(t.startswith(ag.prefix + "/") for t in sink.messages)


def test_timestamps_strictly_increasing(minute):
    ag, sink = minute
    for name in ("avg1ms", "avg1s", "sigma"):
        t, _ = sink.samples(ag.topic("pwr", name))
        assert np.all(np.diff(t.astype(np.int64)) > 0)
    t, _ = sink.samples(ag.topic("pwr", "avg1ms"))
    assert np.all(np.abs(np.diff(t.astype(np.int64)) - 1_000_000) <= 2_000)


def test_coarse_matches_noise_free_power(minute):
    ag, sink = minute
    _, coarse = sink.samples(ag.topic("pwr", "avg1s"))
    ideal = render_trace(get_scenario("mem_bound"), 50_000, 60.0, seed=0).power.reshape(60, -1).mean(axis=1)
    assert np.mean(np.abs(coarse - ideal) / ideal) <= 0.01


def test_fine_and_coarse_conserve_energy(minute):
    ag, sink = minute
    _, fine = sink.samples(ag.topic("pwr", "avg1ms"))
    _, coarse = sink.samples(ag.topic("pwr", "avg1s"))
    np.testing.assert_allclose(fine.reshape(60, 1000).mean(axis=1), coarse, rtol=1e-12)


def test_psd_records(minute):
    ag, sink = minute
    recs = sink.messages[ag.topic("pwr", "psd")]
    assert all(len(r) == RECORD_SIZE == 4112 for r in recs)
    r = deserialize_record(recs[0])
    assert r.fs == 50_000 and r.t_start > ag.cfg.epoch_ns


def test_health_records(minute):
    ag, sink = minute
    h = json.loads(sink.messages[ag.topic("$health")][-1])
    assert h["node_id"] == "node01" and h["sim_time_s"] == pytest.approx(60.0)
    assert h["fifo_overflow_events"] == 0 and h["outbox_dropped"] == 0
    assert h["samples"] == 60 * 50_000
    # the workload's own fluctuation dominates the noise estimate
    assert np.isfinite(h["sigma_p_w"]) and h["sigma_p_w"] > 0
    assert h["rate_hz"] > 0


def test_snapshot_not_ready_before_window():
    ag = Agent(AgentConfig(node_id="n", seed=1))
    ag.step(0.02)
    with pytest.raises(NotReady):
        ag.snapshot_psd()
    ag.step(0.02)
    assert len(ag.snapshot_psd()) == 4112


def test_deterministic():
    def run():
        sink = MemorySink()
        Agent(AgentConfig(node_id="n", scenario="cpu_bound", seed=9), sink).run(2.0)
        return {k: v for k, v in sink.messages.items() if not k.endswith("$health")}

    assert run() == run()


def test_static_tick_classified_quickly(windows):
    model = train_centroids({c: windows(c, 20, 300 + i) for i, c in enumerate(CORPUS_CLASSES)})
    sink = MemorySink()
    ag = Agent(AgentConfig(node_id="n", scenario="static_tick", seed=4), sink, centroids=model)
    ag.run(3.0)
    labels = [json.loads(m)["label"] for m in sink.messages[ag.topic("pwr", "class")]]
    assert len(labels) == 3 and "static_tick" in labels


class FlakySink(MemorySink):
    def __init__(self):
        super().__init__()
        self.down = False

    def publish_many(self, items):
        if self.down:
            raise ConnectionError("broker gone")
        super().publish_many(items)


def test_outbox_buffers_then_drops_oldest():
    sink = FlakySink()
    cfg = AgentConfig(node_id="n", seed=2, outbox_seconds=0.5, counters=())
    ag = Agent(cfg, sink)
    ag.step(0.1)
    before = len(sink.messages[ag.topic("pwr", "avg1ms")])
    sink.down = True
    ag.step(0.3)
    assert ag.outbox and ag.outbox_dropped == 0
    ag.step(1.0)
    assert len(ag.outbox) == ag.outbox_limit and ag.outbox_dropped > 0
    sink.down = False
    ag.step(0.1)
    assert not ag.outbox
    t, _ = sink.samples(ag.topic("pwr", "avg1ms"))
    # the newest fine samples survived, the oldest were dropped
    assert np.all(np.diff(t.astype(np.int64)) > 0)
    gaps = np.flatnonzero(np.diff(t.astype(np.int64)) > 1_500_000)
    assert gaps.size == 1 and gaps[0] == before - 1  # delivered before the outage, then a hole
    assert t.size < 1500 and (t[-1] - ag.cfg.epoch_ns) > 1_490_000_000


def test_fifo_overflow_reported():
    ag = Agent(AgentConfig(node_id="n", seed=5), MemorySink(), fifo=KernelFifo(50))
    ag.step(0.1)
    h = ag.health()
    assert h["fifo_overflow_events"] == 1 and h["blocks_dropped"] > 0
    assert any(e.startswith("adc_overflow:") for e in h["events"])


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        AgentConfig(node_id="a/b")
    with pytest.raises(ValueError):
        AgentConfig(node_id="n", fine_period=1e-3 / 3)
    with pytest.raises(ValueError):
        AgentConfig.from_dict({"node_id": "n", "bogus": 1})
    with pytest.raises(ValueError):
        CounterSpec("x", 0, 1.0)
    p = tmp_path / "a.yaml"
    p.write_text("agent:\n  node_id: n7\n  scenario: cpu_bound\n  psd_period: 2\n")
    cfg = AgentConfig.load(p, seed=11)
    assert (cfg.node_id, cfg.scenario, cfg.psd_period, cfg.seed) == ("n7", "cpu_bound", 2, 11)


def test_emit_counters_shape():
    ag = Agent(AgentConfig(node_id="n", seed=1))
    pairs = ag.emit_counters("occ")
    assert len(pairs) == 242 and all(t.startswith(ag.topic("occ") + "/") for t, _ in pairs)
