"""Agents, broker and collector in one process.

Three node agents publish their 1 ms / 1 s power streams, 40 ms spectrograms
and BMC counters to a broker; a collector subscribed to the power topics
stores them, and the store is queried back.

    python demos/telemetry_pipeline.py
"""

import tempfile
import time

import numpy as np

from digmon.agent import Agent, AgentConfig
from digmon.calib import calibrate
from digmon.collector import Collector, list_topics, query_scalar, read_topic
from digmon.spectral.record import deserialize_record
from digmon.transport.broker import BrokerThread
from digmon.transport.client import Client

SECONDS = 5.0

root = tempfile.mkdtemp(prefix="dig-demo-")
model = calibrate(seed=0)
with BrokerThread() as bt:
    col = Collector(root, ["+/+/+/pwr/#"], port=bt.port).start()
    clients, agents = [], []
    for n, scenario in enumerate(("idle", "cpu_bound", "static_tick")):
        cfg = AgentConfig(node_id=f"node{n:02d}", scenario=scenario, org="davide", cluster="rack0",
                          broker_port=bt.port, seed=n)
        c = Client(port=bt.port, client_id=cfg.node_id).connect()
        clients.append(c)
        agents.append(Agent(cfg, c, calibration=model))
    t0 = time.perf_counter()
    for _ in range(int(SECONDS / 0.1)):
        for a in agents:
            a.step()
    print(f"simulated {SECONDS:g} s on {len(agents)} nodes in {time.perf_counter() - t0:.1f} s")
    time.sleep(0.5)
    col.drain(10)
    col.close()
    for c in clients:
        c.close()
    print(f"broker: {bt.stats()['published']} publications")

print(f"\nstore at {root}: {len(list_topics(root))} topics")
for a in agents:
    t, v = query_scalar(root, a.topic("pwr", "avg1s"))
    _, fine = query_scalar(root, a.topic("pwr", "avg1ms"))
    print(f"  {a.prefix:<24} 1 s means {np.round(v, 2)}  ({fine.size} fine samples)")

_, _, recs = read_topic(root, agents[2].topic("pwr", "psd"))
r = deserialize_record(recs[-1])
k = int(np.argmax(r.db[20:])) + 20
print(f"\nlast spectrogram of {agents[2].prefix}: strongest line at {k * r.fs / 4096:.0f} Hz, {r.db[k]:.1f} dB")
