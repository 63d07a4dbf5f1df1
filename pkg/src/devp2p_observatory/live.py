"""Live crawl: real sockets, wall clock, and the traffic limits that always apply.

Limits enforced regardless of configuration intent: at most
``dialRatePerPeerPerMinute`` FindNode requests and dials per peer per
minute, and a global bandwidth ceiling. Datagrams over the ceiling are
dropped; new dials wait until the budget recovers.
"""
from __future__ import annotations

import asyncio
import logging
import random
import socket
import time
from pathlib import Path
from typing import Callable, Optional

from . import crypto, store
from .analyzer import Analyzer, Collector, Report
from .codec import Endpoint
from .config import AppConfig, parse_enode
from .discovery import DiscoveryConfig, Node
from .forkid import ChainConfig, Head, chain_by_name
from .observer import Observer, ObserverConfig
from .session import SessionConfig

log = logging.getLogger(__name__)

LIVE_CAPS = (("eth", 68), ("snap", 1))
# p2p v5 turns on snappy frame compression, which this tool does not implement
LIVE_P2P_VERSION = 4
_MERGE_BLOCK, _MERGE_TIME = 15_537_394, 1_663_224_179


def estimate_head(chain: ChainConfig, now: float) -> Head:
    """Rough head for fork-id purposes: 12 s slots after the merge on mainnet."""
    if chain.network_id == 1 and now > _MERGE_TIME:
        return Head(_MERGE_BLOCK + int((now - _MERGE_TIME) // 12), int(now))
    return Head(0, int(now))


class Bandwidth:
    """Token bucket over bytes, refilled continuously, one second of burst."""

    def __init__(self, mbit_per_s: float, clock: Callable[[], float]) -> None:
        self.rate = mbit_per_s * 1_000_000 / 8
        self.clock = clock
        self.tokens = self.rate
        self._last = clock()
        self.dropped = 0

    def _refill(self) -> None:
        now = self.clock()
        self.tokens = min(self.rate, self.tokens + (now - self._last) * self.rate)
        self._last = now

    def try_take(self, n: int) -> bool:
        self._refill()
        if self.tokens >= n:
            self.tokens -= n
            return True
        self.dropped += 1
        return False

    def charge(self, n: int) -> None:
        self._refill()
        self.tokens -= n

    async def wait_positive(self) -> None:
        self._refill()
        while self.tokens <= 0:
            await asyncio.sleep(-self.tokens / self.rate + 0.01)
            self._refill()


class _UdpProtocol(asyncio.DatagramProtocol):
    def __init__(self, on_datagram, bandwidth: Bandwidth) -> None:
        self.on_datagram = on_datagram
        self.bandwidth = bandwidth
        self.transport = None

    def connection_made(self, transport) -> None:
        self.transport = transport

    def datagram_received(self, data: bytes, addr) -> None:
        self.bandwidth.charge(len(data))
        self.on_datagram(data, addr[:2])

    def error_received(self, exc) -> None:
        log.debug("udp error: %s", exc)


class _ThrottledUdp:
    def __init__(self, protocol: _UdpProtocol) -> None:
        self.protocol = protocol

    def sendto(self, data: bytes, addr) -> None:
        if self.protocol.bandwidth.try_take(len(data)):
            self.protocol.transport.sendto(data, addr)


class _CountingWriter:
    """StreamWriter wrapper that charges every write to the bandwidth bucket."""

    def __init__(self, writer, bandwidth: Bandwidth) -> None:
        self._w = writer
        self._bw = bandwidth

    def write(self, data: bytes) -> None:
        self._bw.charge(len(data))
        self._w.write(data)

    def __getattr__(self, name):
        return getattr(self._w, name)


def local_address_towards(ip: str) -> str:
    """Source address the kernel would use to reach ``ip`` (no packet is sent)."""
    family = socket.AF_INET6 if ":" in ip else socket.AF_INET
    with socket.socket(family, socket.SOCK_DGRAM) as s:
        s.connect((ip, 9))
        return s.getsockname()[0]


def observer_config(cfg: AppConfig, head: Head) -> ObserverConfig:
    d, s = cfg["discovery"], cfg["session"]
    disc = DiscoveryConfig(
        alpha=d["alpha"], max_concurrent_lookups=d["maxConcurrentLookups"],
        neighbors_timeout=d["neighborsTimeoutMs"] / 1000.0, bond_window=d["bondWindowHours"] * 3600.0,
        rate_per_peer_per_minute=d["dialRatePerPeerPerMinute"], table_refresh=d["tableRefreshSeconds"],
        revalidate_interval=d["revalidateSeconds"], bucket_capacity=d["bucketCapacity"])
    session = SessionConfig(s["clientId"], LIVE_CAPS, chain_by_name(s["chain"]), head,
                            listen_port=s["port"], p2p_version=LIVE_P2P_VERSION,
                            hello_timeout=s["helloTimeoutSeconds"], status_timeout=s["statusTimeoutSeconds"])
    return ObserverConfig(session, disc, max_peer_slots=s["maxPeerSlots"],
                          dial_history_expiry=s["dialHistoryExpirySeconds"], channel="rlpx",
                          connect_timeout=s["connectTimeoutSeconds"], drain_deadline=s["drainDeadlineSeconds"])


async def crawl(cfg: AppConfig, outdir: Path, duration: Optional[float] = None,
                bind_ip: str = "0.0.0.0", public_ip: Optional[str] = None) -> Report:
    """Run the observer against the live network until ``duration`` elapses or cancellation."""
    bootnodes = [parse_enode(u) for u in cfg.bootnodes_raw()]
    if not bootnodes:
        raise ValueError("live crawl needs at least one bootnode in [discovery] bootnodes")
    loop = asyncio.get_running_loop()
    clock = time.time
    rng = random.Random(cfg.get("general", "seed"))
    chain = chain_by_name(cfg.get("session", "chain"))
    ocfg = observer_config(cfg, estimate_head(chain, clock()))
    bandwidth = Bandwidth(cfg.get("limits", "bandwidthMbit"), clock)
    outdir.mkdir(parents=True, exist_ok=True)
    analyzer = Analyzer()
    events = store.EventLog(outdir / store.EVENTS)
    collector = Collector(clock, [events.append, analyzer.ingest])

    port = cfg.get("discovery", "port")
    public_ip = public_ip or local_address_towards(bootnodes[0][1].ip)
    endpoint = Endpoint(public_ip, port, cfg.get("session", "port"))
    key = crypto.generate_private_key(rng)

    async def connect(ip: str, tcp_port: int):
        await bandwidth.wait_positive()
        reader, writer = await asyncio.open_connection(ip, tcp_port)
        return reader, _CountingWriter(writer, bandwidth)

    observer = Observer(key, endpoint, udp=None, connect=connect, clock=clock, config=ocfg,
                        emit=collector.emit, rng=rng)
    transport, protocol = await loop.create_datagram_endpoint(
        lambda: _UdpProtocol(observer.discovery.datagram_received, bandwidth), local_addr=(bind_ip, port))
    observer.discovery.transport = _ThrottledUdp(protocol)
    for identity, ep in bootnodes:
        observer.discovery.add_bootnode(Node(identity, ep))
    observer.start(lookups=True)
    snapshot_every = cfg.get("storage", "snapshotSeconds")
    deadline = None if duration is None else clock() + duration
    try:
        while deadline is None or clock() < deadline:
            left = snapshot_every if deadline is None else max(0.0, min(snapshot_every, deadline - clock()))
            await asyncio.sleep(left)
            store.save_peers(outdir / store.PEERS, [r.to_json() for r in analyzer.records.values()])
    finally:
        await observer.stop()
        transport.close()
        store.save_peers(outdir / store.PEERS, [r.to_json() for r in analyzer.records.values()])
        store.save_table(outdir / store.TABLE, observer.discovery.table.dump_lines())
        events.close()
        if bandwidth.dropped:
            log.warning("%d datagrams dropped by the bandwidth ceiling", bandwidth.dropped)
    return analyzer.build_report()


__all__ = ["crawl", "Bandwidth", "estimate_head", "observer_config", "LIVE_P2P_VERSION"]
