"""One message interface over two transports: a deterministic virtual-time
network simulation and a length-prefixed TCP transport.

Simulated delivery models serialization as free and transmission as
size/bandwidth plus latency; each directed link is FIFO (a message starts
transmitting only when the link is free). Node kills silently drop queued
and future traffic, which is what drives fault detection upstream.
"""

from __future__ import annotations

import heapq
import logging
import socket
import threading
import time
from dataclasses import dataclass, field

from . import wire

log = logging.getLogger(__name__)


@dataclass
class Message:
    kind: int
    sender: int
    receiver: int
    batch_id: int = -1
    payload: bytes = b""

    @property
    def byte_size(self) -> int:
        return len(self.payload)

    @property
    def kind_name(self) -> str:
        return wire.KIND_NAMES.get(self.kind, str(self.kind))


@dataclass(frozen=True)
class SimLink:
    bandwidth: float  # bytes / second
    latency: float = 0.0  # seconds
    fail_schedule: tuple = ()

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.latency < 0:
            raise ValueError("latency must be non-negative")


class SimClock:
    """Virtual clock owned by the event loop; `charge` models compute cost."""

    def __init__(self):
        self._now = 0.0

    def now(self) -> float:
        return self._now

    def charge(self, seconds: float):
        if seconds < 0:
            raise ValueError("cannot charge negative time")
        self._now += seconds

    def _set(self, t: float):
        self._now = t


class WallClock:
    """Monotonic wall clock for live mode; `charge` is a no-op."""

    def __init__(self):
        self._t0 = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self._t0

    def charge(self, seconds: float):
        pass


class SimNetwork:
    """Single-threaded discrete-event loop owning the virtual clock.

    Handlers registered per node receive delivered Messages; every handler
    invocation happens at a well-defined virtual time, ordered by
    (time, insertion sequence) so identical runs replay identically.
    """

    def __init__(self, clock: SimClock | None = None, default_link: SimLink | None = None):
        self.clock = clock or SimClock()
        self._events: list = []
        self._seq = 0
        self._handlers: dict[int, callable] = {}
        self._links: dict[tuple[int, int], SimLink] = {}
        self._default_link = default_link or SimLink(bandwidth=float("inf"))
        self._busy_until: dict[tuple[int, int], float] = {}
        self._killed: set[int] = set()
        self._dropped_links: set[tuple[int, int]] = set()
        self.delivered = 0
        self.lost = 0

    # --- topology ---------------------------------------------------------

    def add_node(self, node_id: int, handler):
        self._handlers[node_id] = handler

    def set_link(self, a: int, b: int, link: SimLink, symmetric: bool = True):
        self._links[(a, b)] = link
        if symmetric:
            self._links[(b, a)] = link

    def link_between(self, a: int, b: int) -> SimLink:
        return self._links.get((a, b), self._default_link)

    def measure_bandwidth(self, a: int, b: int) -> float:
        """Sim mode reports the configured link rate exactly."""
        if a in self._killed or b in self._killed:
            raise ConnectionError(f"node {a} or {b} unreachable")
        return self.link_between(a, b).bandwidth

    # --- fault injection ----------------------------------------------------

    def kill(self, node_id: int):
        self._killed.add(node_id)

    def restart(self, node_id: int):
        self._killed.discard(node_id)

    def drop_link(self, a: int, b: int, symmetric: bool = True):
        self._dropped_links.add((a, b))
        if symmetric:
            self._dropped_links.add((b, a))

    def restore_link(self, a: int, b: int, symmetric: bool = True):
        self._dropped_links.discard((a, b))
        if symmetric:
            self._dropped_links.discard((b, a))

    def is_killed(self, node_id: int) -> bool:
        return node_id in self._killed

    # --- events -----------------------------------------------------------

    def schedule(self, delay: float, fn):
        if delay < 0:
            raise ValueError("cannot schedule into the past")
        heapq.heappush(self._events, (self.clock.now() + delay, self._seq, fn))
        self._seq += 1

    def send(self, msg: Message):
        """Queue msg for delivery at now + latency + size/bandwidth (FIFO per link)."""
        key = (msg.sender, msg.receiver)
        if msg.sender in self._killed or msg.receiver in self._killed or key in self._dropped_links:
            self.lost += 1
            return
        link = self.link_between(msg.sender, msg.receiver)
        start = max(self.clock.now(), self._busy_until.get(key, 0.0))
        done = start + msg.byte_size / link.bandwidth
        self._busy_until[key] = done
        deliver_at = done + link.latency

        def deliver():
            if msg.receiver in self._killed or key in self._dropped_links:
                self.lost += 1
                return
            handler = self._handlers.get(msg.receiver)
            if handler is None:
                self.lost += 1
                return
            self.delivered += 1
            handler(msg)

        heapq.heappush(self._events, (deliver_at, self._seq, deliver))
        self._seq += 1

    def run(self, until: float | None = None, max_events: int = 50_000_000):
        """Drain the event queue in (time, seq) order."""
        count = 0
        while self._events:
            t, _, fn = heapq.heappop(self._events)
            if until is not None and t > until:
                heapq.heappush(self._events, (t, self._seq, fn))
                self._seq += 1
                break
            self.clock._set(max(self.clock.now(), t))
            fn()
            count += 1
            if count >= max_events:
                raise RuntimeError("simulation exceeded the event budget")
        return count


class LiveNetwork:
    """TCP transport: one listening socket per node on loopback, length-
    prefixed frames, one reader thread per accepted connection.

    Bandwidth probes are answered at the transport level so a measurement
    does not depend on the receiving node's executor being idle.
    """

    def __init__(self, addresses: dict[int, tuple[str, int]]):
        self.addresses = dict(addresses)
        self.clock = WallClock()
        self._handlers: dict[int, callable] = {}
        self._servers: dict[int, socket.socket] = {}
        self._conns: dict[tuple[int, int], socket.socket] = {}
        self._conn_locks: dict[tuple[int, int], threading.Lock] = {}
        self._lock = threading.Lock()
        self._killed: set[int] = set()
        self._running = True
        self._threads: list[threading.Thread] = []

    def start_node(self, node_id: int, handler):
        self._handlers[node_id] = handler
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind(self.addresses[node_id])
        srv.listen(16)
        self._servers[node_id] = srv
        t = threading.Thread(target=self._accept_loop, args=(node_id, srv), daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self, node_id: int, srv: socket.socket):
        while self._running:
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            t = threading.Thread(target=self._reader, args=(node_id, conn), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, node_id: int, conn: socket.socket):
        try:
            while self._running:
                payload = wire.read_frame(conn)
                if payload is None:
                    return
                kind, sender, receiver, batch_id, body = wire.parse_payload(payload)
                if kind == wire.KIND_BANDWIDTH_PROBE:
                    ack = wire.frame(wire.KIND_BANDWIDTH_ACK, receiver, sender, -1,
                                     wire.control_body({"bytes": len(body)}))
                    conn.sendall(ack)
                    continue
                if node_id in self._killed:
                    continue
                handler = self._handlers.get(node_id)
                if handler is not None:
                    handler(Message(kind, sender, receiver, batch_id, body))
        except (OSError, wire.WireError):
            return
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _connection(self, sender: int, receiver: int) -> tuple[socket.socket, threading.Lock]:
        key = (sender, receiver)
        with self._lock:
            conn = self._conns.get(key)
            if conn is None:
                conn = socket.create_connection(self.addresses[receiver], timeout=10.0)
                self._conns[key] = conn
                self._conn_locks[key] = threading.Lock()
            return conn, self._conn_locks[key]

    def send(self, msg: Message):
        if msg.sender in self._killed or msg.receiver in self._killed:
            return
        try:
            conn, lock = self._connection(msg.sender, msg.receiver)
            data = wire.frame(msg.kind, msg.sender, msg.receiver, msg.batch_id, msg.payload)
            with lock:
                conn.sendall(data)
        except OSError as exc:
            log.debug("send %s -> %s failed: %s", msg.sender, msg.receiver, exc)

    def measure_bandwidth(self, a: int, b: int, probe_bytes: int = 1_000_000) -> float:
        """Timed probe: bytes sent over elapsed time until the peer acknowledges."""
        conn = socket.create_connection(self.addresses[b], timeout=10.0)
        try:
            body = bytes(probe_bytes)
            data = wire.frame(wire.KIND_BANDWIDTH_PROBE, a, b, -1, body)
            t0 = time.monotonic()
            conn.sendall(data)
            payload = wire.read_frame(conn)
            elapsed = time.monotonic() - t0
            if payload is None:
                raise ConnectionError("bandwidth probe got no acknowledgment")
            kind, *_ , ack_body = wire.parse_payload(payload)
            if kind != wire.KIND_BANDWIDTH_ACK:
                raise ConnectionError("unexpected reply to bandwidth probe")
            return probe_bytes / max(elapsed, 1e-9)
        finally:
            conn.close()

    def kill(self, node_id: int):
        self._killed.add(node_id)

    def restart(self, node_id: int):
        self._killed.discard(node_id)

    def is_killed(self, node_id: int) -> bool:
        return node_id in self._killed

    def close(self):
        self._running = False
        with self._lock:
            for conn in self._conns.values():
                try:
                    conn.close()
                except OSError:
                    pass
            self._conns.clear()
        for srv in self._servers.values():
            try:
                srv.close()
            except OSError:
                pass


def free_ports(count: int) -> list[int]:
    """Reserve distinct ephemeral loopback ports."""
    socks = []
    ports = []
    for _ in range(count):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.bind(("127.0.0.1", 0))
        ports.append(s.getsockname()[1])
        socks.append(s)
    for s in socks:
        s.close()
    return ports
