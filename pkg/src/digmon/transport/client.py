"""Blocking client with a background reader thread.

``publish`` is fire-and-forget.  ``subscribe`` returns after the broker's
SUBACK, so every later matching publish is delivered to the handler, which
runs on the reader thread.  With ``auto_reconnect`` the reader re-dials
with exponential backoff and restores subscriptions; while the link is down
``publish`` raises :class:`ConnectionError`.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Callable

from .frame import Frame, FrameReader, FrameType, ProtocolError, encode_frame, publish_prefix
from .broker import SUBACK_OK
from .topics import TopicFilter, validate_topic

__all__ = ["Client", "Backoff", "SubscriptionError"]

log = logging.getLogger(__name__)

Handler = Callable[[str, bytes], None]


class SubscriptionError(RuntimeError):
    pass


class Backoff:
    def __init__(self, initial: float = 0.05, maximum: float = 2.0, factor: float = 2.0):
        if initial <= 0 or maximum < initial or factor < 1:
            raise ValueError("bad backoff parameters")
        self.initial, self.maximum, self.factor = initial, maximum, factor
        self.current = initial

    def next(self) -> float:
        d = self.current
        self.current = min(self.current * self.factor, self.maximum)
        return d

    def reset(self):
        self.current = self.initial


class Client:
    def __init__(self, host: str = "127.0.0.1", port: int = 1883, client_id: str = "client",
                 auto_reconnect: bool = True, backoff: Backoff | None = None,
                 connect_timeout: float = 5.0, recv_size: int = 256 * 1024):
        self.host, self.port = host, port
        self.requested_id = client_id
        self.client_id = None
        self.auto_reconnect = auto_reconnect
        self.backoff = backoff or Backoff()
        self.connect_timeout = connect_timeout
        self.recv_size = recv_size
        self._sock = None
        self._wlock = threading.Lock()
        self._state = threading.Condition()
        self._connected = False
        self._closing = False
        self._subs: dict[int, tuple[str, Handler]] = {}
        self._acks: dict[int, int] = {}
        self._prefix_cache: dict[str, bytes] = {}
        self._reader = None
        self.reconnects = 0
        self.received = 0
        self.sent = 0

    # connection management
    def _dial(self):
        s = socket.create_connection((self.host, self.port), timeout=self.connect_timeout)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        s.sendall(encode_frame(Frame(FrameType.CONNECT, 0, "", self.requested_id.encode())))
        reader = FrameReader()
        frames = []
        while not frames:
            data = s.recv(4096)
            if not data:
                raise ConnectionError("broker closed during handshake")
            frames = reader.feed(data)
        if frames[0].type is not FrameType.CONNACK or frames[0].flags != 0:
            raise ConnectionError("broker refused the connection")
        s.settimeout(None)
        self.client_id = frames[0].payload.decode()
        return s, reader, frames[1:]

    def connect(self) -> "Client":
        s, reader, extra = self._dial()
        with self._state:
            self._sock = s
            self._connected = True
            self._closing = False
        self._reader = threading.Thread(target=self._read_loop, args=(reader, extra), daemon=True,
                                        name=f"client-{self.requested_id}")
        self._reader.start()
        return self

    @property
    def connected(self) -> bool:
        return self._connected

    def close(self):
        with self._state:
            self._closing = True
            sock = self._sock
            was = self._connected
            self._connected = False
            self._state.notify_all()
        if sock is not None:
            if was:
                try:
                    with self._wlock:
                        sock.sendall(encode_frame(Frame(FrameType.DISCONNECT)))
                except OSError:
                    pass
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        if self._reader and self._reader is not threading.current_thread():
            self._reader.join(5)

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()

    def wait_connected(self, timeout: float = 5.0) -> bool:
        with self._state:
            return self._state.wait_for(lambda: self._connected or self._closing, timeout) and self._connected

    # outbound
    def _send(self, data: bytes):
        if not self._connected:
            raise ConnectionError("not connected to broker")
        try:
            with self._wlock:
                self._sock.sendall(data)
        except OSError as exc:
            raise ConnectionError(f"send failed: {exc}") from exc
        self.sent += 1

    def publish(self, topic: str, payload: bytes):
        prefix = self._prefix_cache.get(topic)
        if prefix is None or len(payload) != 16:
            validate_topic(topic)
            prefix = publish_prefix(topic, 0, len(payload))
            if len(payload) == 16:
                if len(self._prefix_cache) > 4096:
                    self._prefix_cache.clear()
                self._prefix_cache[topic] = prefix
        self._send(prefix + payload)

    def publish_many(self, items):
        """Send several ``(topic, payload)`` pairs in one write."""
        parts = []
        for topic, payload in items:
            validate_topic(topic)
            parts.append(publish_prefix(topic, 0, len(payload)) + payload)
        self._send(b"".join(parts))

    def ping(self):
        self._send(encode_frame(Frame(FrameType.PING)))

    def subscribe(self, pattern: str, handler: Handler, timeout: float = 5.0) -> int:
        TopicFilter(pattern)  # raises on malformed filters
        with self._state:
            sid = next((i for i in range(1, 256) if i not in self._subs), None)
            if sid is None:
                raise SubscriptionError("at most 255 subscriptions per connection")
            self._subs[sid] = (pattern, handler)
            self._acks.pop(sid, None)
        self._send(encode_frame(Frame(FrameType.SUBSCRIBE, sid, pattern)))
        with self._state:
            ok = self._state.wait_for(lambda: sid in self._acks or self._closing, timeout)
            status = self._acks.pop(sid, None)
            if not ok or status != SUBACK_OK:
                self._subs.pop(sid, None)
                raise SubscriptionError(f"subscription {pattern!r} not acknowledged (status {status})")
        return sid

    # inbound
    def _dispatch(self, f: Frame):
        if f.type is FrameType.PUBLISH:
            sub = self._subs.get(f.flags)
            if sub is not None:
                self.received += 1
                try:
                    sub[1](f.topic, f.payload)
                except Exception:  # a faulty handler must not kill the reader
                    log.exception("subscription handler failed for %s", f.topic)
        elif f.type is FrameType.SUBACK:
            with self._state:
                self._acks[f.flags] = f.payload[0] if f.payload else 1
                self._state.notify_all()

    def _read_loop(self, reader: FrameReader, pending):
        for f in pending:
            self._dispatch(f)
        while True:
            sock = self._sock
            try:
                while True:
                    data = sock.recv(self.recv_size)
                    if not data:
                        raise ConnectionError("broker closed the connection")
                    for f in reader.feed(data):
                        self._dispatch(f)
            except (OSError, ConnectionError, ProtocolError) as exc:
                with self._state:
                    self._connected = False
                    closing = self._closing
                    self._state.notify_all()
                if closing or not self.auto_reconnect:
                    return
                log.info("connection lost (%s); reconnecting", exc)
                reader = self._reconnect()
                if reader is None:
                    return

    def _reconnect(self):
        self.backoff.reset()
        while True:
            with self._state:
                if self._closing:
                    return None
            time.sleep(self.backoff.next())
            try:
                s, reader, extra = self._dial()
            except OSError:
                continue
            with self._state:
                if self._closing:
                    s.close()
                    return None
                try:
                    self._sock.close()
                except OSError:
                    pass
                self._sock = s
                self._connected = True
                subs = dict(self._subs)
                self._state.notify_all()
            self.reconnects += 1
            try:
                for sid, (pattern, _) in subs.items():
                    with self._wlock:
                        s.sendall(encode_frame(Frame(FrameType.SUBSCRIBE, sid, pattern)))
            except OSError:
                continue
            for f in extra:
                self._dispatch(f)
            return reader
