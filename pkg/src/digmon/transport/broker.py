"""At-most-once topic broker on asyncio.

Every connection owns a bounded egress queue.  Delivered frames are written
straight to the socket while the transport accepts them; once the transport
signals back-pressure they wait in the queue, and a full queue drops its
oldest frame and counts the drop.  Drop counters are published every
``introspection_interval`` seconds on ``$sys/broker/drops/<client_id>``.
"""

from __future__ import annotations

import asyncio
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass

from .frame import (
    MAGIC,
    MAX_FRAME,
    Frame,
    FrameReader,
    FrameType,
    ProtocolError,
    encode_frame,
    _HEAD,
    _U16,
    _U32,
)
from .payload import pack_sample
from .topics import TopicError, TopicFilter, validate_topic

__all__ = ["BrokerLimits", "Broker", "BrokerThread", "run_broker", "SUBACK_OK", "SUBACK_REJECTED"]

log = logging.getLogger(__name__)

SUBACK_OK = 0
SUBACK_REJECTED = 1
_ROUTE_CACHE_MAX = 65536


@dataclass(frozen=True)
class BrokerLimits:
    queue_limit: int = 65536          # frames per subscriber connection
    write_high_water: int = 256 * 1024
    max_connections: int = 1024
    introspection_interval: float = 1.0

    def __post_init__(self):
        if self.queue_limit < 1 or self.max_connections < 1:
            raise ValueError("limits must be >= 1")

    @property
    def queued_bytes_bound(self) -> int:
        """Upper bound of bytes held per connection (queue plus transport buffer)."""
        return self.queue_limit * MAX_FRAME + self.write_high_water + MAX_FRAME


class _Connection(asyncio.Protocol):
    def __init__(self, broker: "Broker"):
        self.broker = broker
        self.transport = None
        self.reader = FrameReader()
        self.client_id = None
        self.subs: dict[int, TopicFilter] = {}
        self.queue: deque = deque()
        self.queued_bytes = 0
        self.paused = False
        self._batch: list = []
        self._flush_scheduled = False
        self.drops = 0
        self.delivered = 0
        self.closed = False

    # asyncio callbacks
    def connection_made(self, transport):
        self.transport = transport
        transport.set_write_buffer_limits(high=self.broker.limits.write_high_water)
        if len(self.broker.connections) >= self.broker.limits.max_connections:
            transport.close()
            return
        self.broker.connections.add(self)

    def connection_lost(self, exc):
        self.closed = True
        self.broker._drop_connection(self)

    def pause_writing(self):
        self.paused = True

    def resume_writing(self):
        self.paused = False
        self._drain_queue()

    def data_received(self, data):
        try:
            frames = self.reader.feed(data)
            for f in frames:
                self._handle(f)
        except ProtocolError as exc:
            log.info("protocol error from %s: %s", self.client_id or "?", exc)
            self.broker.protocol_errors += 1
            self.transport.abort()

    # protocol
    def _handle(self, f: Frame):
        t = f.type
        if self.client_id is None:
            if t is not FrameType.CONNECT:
                raise ProtocolError(f"{t.name} before CONNECT")
            self.client_id = self.broker._register_id(f.payload.decode("utf-8", "replace"))
            self.send(encode_frame(Frame(FrameType.CONNACK, 0, "", self.client_id.encode())))
            return
        if t is FrameType.PUBLISH:
            try:
                validate_topic(f.topic)
            except TopicError as exc:
                raise ProtocolError(str(exc)) from exc
            self.broker.route(f.topic, f.payload)
        elif t is FrameType.SUBSCRIBE:
            status = SUBACK_OK
            try:
                flt = TopicFilter(f.topic)
            except TopicError:
                status = SUBACK_REJECTED
            if f.flags == 0:
                status = SUBACK_REJECTED
            if status == SUBACK_OK:
                self.subs[f.flags] = flt
                self.broker._routes_changed()
            # SUBACK is queued ahead of any delivery for the new subscription
            self.send(encode_frame(Frame(FrameType.SUBACK, f.flags, "", bytes([status]))))
        elif t is FrameType.PING:
            self.send(encode_frame(Frame(FrameType.PONG)))
        elif t is FrameType.DISCONNECT:
            self.transport.close()
        else:
            raise ProtocolError(f"unexpected {t.name} from client")

    # egress
    def send(self, data: bytes):
        if self.closed:
            return
        if self.paused or self.queue:
            lim = self.broker.limits.queue_limit
            if len(self.queue) >= lim:
                old = self.queue.popleft()
                self.queued_bytes -= len(old)
                self.drops += 1
                self.broker.drops_total += 1
            self.queue.append(data)
            self.queued_bytes += len(data)
            return
        self._batch.append(data)
        if not self._flush_scheduled:
            self._flush_scheduled = True
            self.broker.loop.call_soon(self._flush)

    def _flush(self):
        self._flush_scheduled = False
        if self._batch and not self.closed:
            data = b"".join(self._batch)
            self._batch.clear()
            self.transport.write(data)

    def _drain_queue(self):
        if self._batch:
            self._flush()  # older than anything queued
        while self.queue and not self.paused and not self.closed:
            # write in modest batches so pause_writing can interleave
            chunk = []
            size = 0
            while self.queue and size < 64 * 1024:
                d = self.queue.popleft()
                chunk.append(d)
                size += len(d)
            self.queued_bytes -= size
            self.transport.write(b"".join(chunk))


class Broker:
    """Routing core plus the asyncio server.  All state lives on one event loop."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, limits: BrokerLimits | None = None):
        self.host = host
        self.port = port
        self.limits = limits or BrokerLimits()
        self.connections: set[_Connection] = set()
        self._route_cache: dict[str, list] = {}
        self._ids: dict[str, int] = {}
        self.loop = None
        self.server = None
        self.published = 0
        self.delivered = 0
        self.unrouted = 0
        self.drops_total = 0
        self.protocol_errors = 0
        self._sys_task = None

    def _register_id(self, wanted: str) -> str:
        base = "".join(ch for ch in wanted if ch not in "/+#\x00") or "client"
        n = self._ids.get(base, 0)
        self._ids[base] = n + 1
        return base if n == 0 else f"{base}~{n}"

    def _drop_connection(self, conn):
        self.connections.discard(conn)
        if conn.subs:
            self._routes_changed()

    def _routes_changed(self):
        self._route_cache.clear()

    def _lookup(self, topic: str):
        routes = self._route_cache.get(topic)
        if routes is None:
            tb = topic.encode("utf-8")
            routes = []
            for conn in self.connections:
                for sid, flt in conn.subs.items():
                    if flt.matches(topic):
                        head = _HEAD.pack(MAGIC, int(FrameType.PUBLISH), sid) + _U16.pack(len(tb)) + tb
                        routes.append((conn, head))
            if len(self._route_cache) >= _ROUTE_CACHE_MAX:
                self._route_cache.clear()
            self._route_cache[topic] = routes
        return routes

    def route(self, topic: str, payload: bytes) -> int:
        self.published += 1
        routes = self._lookup(topic)
        if not routes:
            self.unrouted += 1
            return 0
        tail = _U32.pack(len(payload)) + payload
        for conn, head in routes:
            conn.send(head + tail)
            conn.delivered += 1
        self.delivered += len(routes)
        return len(routes)

    def stats(self) -> dict:
        return {
            "connections": len(self.connections),
            "published": self.published,
            "delivered": self.delivered,
            "unrouted": self.unrouted,
            "dropped": self.drops_total,
            "protocol_errors": self.protocol_errors,
            "queued_bytes": sum(c.queued_bytes for c in self.connections),
            "drops": {c.client_id: c.drops for c in self.connections if c.client_id},
        }

    def publish_introspection(self):
        now = time.time_ns()
        for conn in list(self.connections):
            if conn.client_id:
                self.route(f"$sys/broker/drops/{conn.client_id}", pack_sample(now, conn.drops))

    async def _sys_loop(self):
        while True:
            await asyncio.sleep(self.limits.introspection_interval)
            self.publish_introspection()

    async def start(self):
        self.loop = asyncio.get_running_loop()
        self.server = await self.loop.create_server(lambda: _Connection(self), self.host, self.port)
        self.port = self.server.sockets[0].getsockname()[1]
        if self.limits.introspection_interval > 0:
            self._sys_task = self.loop.create_task(self._sys_loop())
        return self

    async def close(self):
        if self._sys_task:
            self._sys_task.cancel()
        if self.server:
            self.server.close()
            for c in list(self.connections):
                c.transport.abort()
            await self.server.wait_closed()

    async def serve_forever(self):
        if self.server is None:
            await self.start()
        await self.server.serve_forever()


def run_broker(host: str = "127.0.0.1", port: int = 1883, limits: BrokerLimits | None = None,
               on_ready=None, duration: float | None = None) -> dict:
    """Blocking broker main loop; returns final stats."""

    async def main():
        b = Broker(host, port, limits)
        await b.start()
        if on_ready:
            on_ready(b)
        try:
            if duration is None:
                await b.server.serve_forever()
            else:
                await asyncio.sleep(duration)
        except asyncio.CancelledError:
            pass
        finally:
            st = b.stats()
            await b.close()
        return st

    try:
        return asyncio.run(main())
    except KeyboardInterrupt:
        return {}


class BrokerThread:
    """Broker on a private event loop in a daemon thread (tests, in-process demos)."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, limits: BrokerLimits | None = None):
        self.broker = Broker(host, port, limits)
        self._ready = threading.Event()
        self._thread = threading.Thread(target=self._run, name="broker", daemon=True)
        self._loop = None
        self._exc = None

    def _run(self):
        self._loop = asyncio.new_event_loop()
        asyncio.set_event_loop(self._loop)
        try:
            self._loop.run_until_complete(self.broker.start())
        except Exception as exc:  # bind failures surface in start()
            self._exc = exc
            self._ready.set()
            return
        self._ready.set()
        self._loop.run_forever()
        self._loop.run_until_complete(self.broker.close())
        self._loop.close()

    def start(self) -> "BrokerThread":
        self._thread.start()
        self._ready.wait(10)
        if self._exc:
            raise self._exc
        return self

    @property
    def port(self) -> int:
        return self.broker.port

    @property
    def address(self):
        return (self.broker.host, self.broker.port)

    def call(self, fn, *args, timeout: float = 5.0):
        """Run ``fn`` on the broker loop and return its result."""
        fut = asyncio.run_coroutine_threadsafe(_acall(fn, *args), self._loop)
        return fut.result(timeout)

    def stats(self) -> dict:
        return self.call(self.broker.stats)

    def stop(self):
        if self._loop and self._loop.is_running():
            self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


async def _acall(fn, *args):
    return fn(*args)
