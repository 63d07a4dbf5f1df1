"""In-memory datagram and stream fabric over virtual time.

Deliveries are quantized to 1 ms ticks. Everything due at the same tick is
delivered in send order, so runs are reproducible regardless of how the
event loop orders equal-deadline timers.
"""
from __future__ import annotations

import asyncio
import random
from collections import deque
from typing import Callable, Deque, Dict, Optional, Tuple

Addr = Tuple[str, int]


class SimWriter:
    """Write half of a simulated TCP stream."""

    def __init__(self, fabric: "Fabric", peer_reader: asyncio.StreamReader, delay_ms: int,
                 local: Addr, remote: Addr) -> None:
        self._fabric = fabric
        self._peer = peer_reader
        self._delay = delay_ms
        self._closed = False
        self._extra = {"sockname": local, "peername": remote}
        self.bytes_written = 0

    def write(self, data: bytes) -> None:
        if self._closed:
            raise ConnectionResetError("write on closed stream")
        self.bytes_written += len(data)
        self._fabric._at(self._delay, self._deliver, bytes(data))

    def _deliver(self, data: bytes) -> None:
        if not self._peer.at_eof():
            self._peer.feed_data(data)

    async def drain(self) -> None:
        return None

    def is_closing(self) -> bool:
        return self._closed

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._fabric._at(self._delay, self._eof)

    def _eof(self) -> None:
        if not self._peer.at_eof():
            self._peer.feed_eof()

    async def wait_closed(self) -> None:
        return None

    def get_extra_info(self, name: str, default=None):
        return self._extra.get(name, default)


class SimUdp:
    def __init__(self, fabric: "Fabric", addr: Addr) -> None:
        self.fabric = fabric
        self.addr = addr
        self.sent = 0

    def sendto(self, data: bytes, addr: Addr) -> None:
        self.sent += 1
        self.fabric._send_datagram(self.addr, tuple(addr), bytes(data))

    def close(self) -> None:
        self.fabric.unbind_udp(self.addr)


class Fabric:
    def __init__(self, loop: asyncio.AbstractEventLoop, rng: Optional[random.Random] = None,
                 default_latency_ms: int = 5, loss: float = 0.0) -> None:
        self.loop = loop
        self.rng = rng or random.Random(0)
        self.default_latency_ms = default_latency_ms
        self.loss = loss
        self._udp: Dict[Addr, Callable[[bytes, Addr], None]] = {}
        self._tcp: Dict[Addr, Callable] = {}
        self._latency: Dict[str, int] = {}
        self._queues: Dict[int, Deque] = {}
        self._accepting: Dict[asyncio.Task, None] = {}
        self.stats = {"datagrams": 0, "dropped": 0, "undeliverable": 0, "connections": 0,
                      "refused": 0}

    # -- timing ---------------------------------------------------------

    def now_tick(self) -> int:
        return round(self.loop.time() * 1000)

    def set_latency(self, ip: str, ms: int) -> None:
        self._latency[ip] = ms

    def delay_ms(self, src: Addr, dst: Addr) -> int:
        d = self._latency.get(src[0], self.default_latency_ms) + self._latency.get(dst[0], self.default_latency_ms)
        return max(1, int(d))

    def _at(self, delay_ms: int, fn: Callable, *args) -> None:
        tick = self.now_tick() + max(1, delay_ms)
        q = self._queues.get(tick)
        if q is None:
            q = self._queues[tick] = deque()
            self.loop.call_at(tick / 1000, self._flush, tick)
        q.append((fn, args))

    def _flush(self, tick: int) -> None:
        q = self._queues.pop(tick)
        while q:
            fn, args = q.popleft()
            fn(*args)

    # -- datagrams ------------------------------------------------------

    def bind_udp(self, addr: Addr, handler: Callable[[bytes, Addr], None]) -> SimUdp:
        if addr in self._udp:
            raise OSError(f"address in use: {addr}")
        self._udp[addr] = handler
        return SimUdp(self, addr)

    def unbind_udp(self, addr: Addr) -> None:
        self._udp.pop(addr, None)

    def _send_datagram(self, src: Addr, dst: Addr, data: bytes) -> None:
        self.stats["datagrams"] += 1
        if self.loss and self.rng.random() < self.loss:
            self.stats["dropped"] += 1
            return
        self._at(self.delay_ms(src, dst), self._deliver_datagram, src, dst, data)

    def _deliver_datagram(self, src: Addr, dst: Addr, data: bytes) -> None:
        handler = self._udp.get(dst)
        if handler is None:
            self.stats["undeliverable"] += 1
            return
        handler(data, src)

    # -- streams --------------------------------------------------------

    def listen_tcp(self, addr: Addr, on_accept: Callable) -> None:
        """``on_accept(reader, writer, remote_addr)`` is run as a task per connection."""
        self._tcp[addr] = on_accept

    def stop_listening(self, addr: Addr) -> None:
        self._tcp.pop(addr, None)

    async def open_connection(self, src_ip: str, ip: str, port: int):
        dst = (ip, port)
        src = (src_ip, 40000 + self.stats["connections"] % 20000)
        self.stats["connections"] += 1
        delay = self.delay_ms(src, dst)
        # SYN out and SYN-ACK (or RST) back
        await asyncio.sleep(2 * delay / 1000)
        accept = self._tcp.get(dst)
        if accept is None:
            self.stats["refused"] += 1
            raise ConnectionRefusedError(f"connection refused by {ip}:{port}")
        client_reader = asyncio.StreamReader()
        server_reader = asyncio.StreamReader()
        client_writer = SimWriter(self, server_reader, delay, src, dst)
        server_writer = SimWriter(self, client_reader, delay, dst, src)
        task = self.loop.create_task(accept(server_reader, server_writer, src))
        self._accepting[task] = None
        task.add_done_callback(lambda t: self._accepting.pop(t, None))
        return client_reader, client_writer

    def connector(self, src_ip: str):
        async def connect(ip: str, port: int):
            return await self.open_connection(src_ip, ip, port)
        return connect

    async def shutdown(self) -> None:
        """Cancel every server-side handler still running."""
        tasks = list(self._accepting)
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        self._udp.clear()
        self._tcp.clear()
