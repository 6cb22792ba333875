"""Broker load benchmark: N periodic publishers, one wildcard subscriber."""

from __future__ import annotations

import multiprocessing as mp
import threading
import time

from .broker import BrokerLimits, BrokerThread, run_broker
from .client import Client
from .payload import SAMPLE

__all__ = ["bench_broker"]


def _broker_proc(port_q, limits):
    run_broker("127.0.0.1", 0, limits, on_ready=lambda b: port_q.put(b.port))


def bench_broker(publishers: int = 16, period_ms: float = 1.0, duration_s: float = 60.0,
                 host: str | None = None, port: int | None = None, limits: BrokerLimits | None = None,
                 in_process: bool = False, drain_timeout: float = 10.0) -> dict:
    """Real-time run; returns a report with sent/delivered/dropped counts.

    Without ``host``/``port`` a private broker is started, in a child process
    unless ``in_process``.  All publishers are driven from one thread on
    their own connections, each sending its sequence number as the value.
    """
    proc = bt = None
    if port is None:
        if in_process:
            bt = BrokerThread(limits=limits).start()
            host, port = "127.0.0.1", bt.port
        else:
            ctx = mp.get_context("spawn")
            q = ctx.Queue()
            proc = ctx.Process(target=_broker_proc, args=(q, limits), daemon=True)
            proc.start()
            host, port = "127.0.0.1", q.get(timeout=30)
    host = host or "127.0.0.1"
    n_per = int(round(duration_s * 1000.0 / period_ms))
    last_seq = [-1] * publishers
    counts = [0] * publishers
    violations = [0]
    sys_drops: dict = {}
    lock = threading.Lock()

    def on_msg(topic, payload):
        i = int(topic.rsplit("/", 2)[1][1:])
        seq = SAMPLE.unpack(payload)[1]
        if seq <= last_seq[i]:
            violations[0] += 1
        last_seq[i] = seq
        counts[i] += 1

    def on_sys(topic, payload):
        with lock:
            sys_drops[topic.rsplit("/", 1)[1]] = SAMPLE.unpack(payload)[1]

    try:
        sub = Client(host, port, client_id="bench-sub", auto_reconnect=False).connect()
        sub.subscribe("bench/#", on_msg)
        sub.subscribe("$sys/broker/drops/+", on_sys)
        pubs = [Client(host, port, client_id=f"bench-pub{i:02d}", auto_reconnect=False).connect()
                for i in range(publishers)]
        topics = [f"bench/p{i:02d}/pwr" for i in range(publishers)]
        period = period_ms / 1000.0
        late = 0
        t_start = time.perf_counter()
        for k in range(n_per):
            target = t_start + k * period
            dt = target - time.perf_counter()
            if dt > 0:
                time.sleep(dt)
            elif dt < -period:
                late += 1
            now = time.time_ns()
            for i in range(publishers):
                pubs[i].publish(topics[i], SAMPLE.pack(now, float(k)))
        send_elapsed = time.perf_counter() - t_start
        expected = n_per * publishers
        deadline = time.perf_counter() + drain_timeout
        while sum(counts) < expected and time.perf_counter() < deadline:
            time.sleep(0.05)
        # one more introspection round so the final drop counters are seen
        time.sleep(1.2)
        delivered = sum(counts)
        for p in pubs:
            p.close()
        sub.close()
        with lock:
            broker_drops = int(sum(sys_drops.values()))
    finally:
        if bt is not None:
            bt.stop()
        if proc is not None:
            proc.terminate()
            proc.join(5)
    return {
        "publishers": publishers,
        "period_ms": period_ms,
        "duration_s": duration_s,
        "sent": expected,
        "delivered": delivered,
        "dropped": expected - delivered,
        "broker_drops": broker_drops,
        "order_violations": violations[0],
        "late_ticks": late,
        "send_elapsed_s": round(send_elapsed, 3),
        "per_publisher": counts,
    }
