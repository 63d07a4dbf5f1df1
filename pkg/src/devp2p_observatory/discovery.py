"""discv4 endpoint: bonding, FindNode/Neighbors exchange, lookups, ENR.

The node is transport-agnostic: it is fed datagrams through
:meth:`DiscoveryNode.datagram_received` and sends through any object with a
``sendto(data, addr)`` method. All timing uses the running asyncio loop and
the injected clock, so the same code runs live or under virtual time.
"""
from __future__ import annotations

import asyncio
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Set, Tuple

from . import codec, crypto
from .codec import (DiscoveryPacket, Endpoint, ENRRequest, ENRResponse, FindNode, NeighborNode,
                    Neighbors, NodeIdentity, NodeRecord, Ping, Pong)
from .table import BOND_WINDOW, RoutingTable, TableEntry, xor_distance

log = logging.getLogger(__name__)

Addr = Tuple[str, int]
EventFn = Callable[[dict], None]


@dataclass
class DiscoveryConfig:
    alpha: int = 3
    max_concurrent_lookups: int = 1
    neighbors_timeout: float = 1.5
    response_timeout: float = 0.5
    bond_window: float = BOND_WINDOW
    rate_per_peer_per_minute: int = 10
    table_refresh: float = 10.0
    revalidate_interval: float = 10.0
    bucket_capacity: int = 16
    max_neighbors_datagrams: int = 4
    expiration: float = codec.EXPIRATION_WINDOW


class DiscoveryError(Exception):
    pass


class RateLimited(DiscoveryError):
    pass


class Timeout(DiscoveryError):
    pass


class BadRecordSignature(DiscoveryError):
    pass


class EmptyTable(DiscoveryError):
    pass


@dataclass(frozen=True)
class Node:
    identity: NodeIdentity
    endpoint: Endpoint

    @property
    def node_id(self) -> bytes:
        return self.identity.node_id

    @classmethod
    def from_neighbor(cls, n: NeighborNode) -> "Node":
        return cls(NodeIdentity(n.node_id), n.endpoint)


# -- rate limiting ----------------------------------------------------------

ALLOW, DENY = "Allow", "Deny"


class RateLimiter:
    """Sliding-window limiter: at most ``limit`` allowed attempts per peer in
    any half-open window of ``window`` seconds. Denied attempts are not
    counted against the peer."""

    def __init__(self, limit: int = 10, window: float = 60.0) -> None:
        self.limit = limit
        self.window = window
        self._hits: Dict[bytes, Deque[float]] = {}

    def check(self, peer: bytes, now: float) -> str:
        hits = self._hits.setdefault(peer, deque())
        while hits and now - hits[0] >= self.window:
            hits.popleft()
        if len(hits) >= self.limit:
            return DENY
        hits.append(now)
        return ALLOW


# -- request bookkeeping ----------------------------------------------------


@dataclass
class BondState:
    last_pong_received: Optional[float] = None
    last_ping_received: Optional[float] = None


COMPLETE = "Complete16"
TIMEOUT_PARTIAL = "TimeoutPartial"
TIMEOUT_EMPTY = "TimeoutEmpty"


@dataclass
class NeighborsAccumulator:
    deadline: float
    expected: int = codec.MAX_NEIGHBORS
    received: List[NeighborNode] = field(default_factory=list)
    datagrams: List[int] = field(default_factory=list)
    done: Optional[asyncio.Future] = None

    def add(self, nodes) -> bool:
        room = self.expected - len(self.received)
        self.received.extend(nodes[:max(room, 0)])
        self.datagrams.append(len(nodes))
        return len(self.received) >= self.expected


@dataclass(frozen=True)
class FindNodeResult:
    nodes: Tuple[Node, ...]
    outcome: str
    elapsed: float
    datagrams: Tuple[int, ...] = ()

    @property
    def label(self) -> str:
        if self.outcome == TIMEOUT_PARTIAL:
            return f"{TIMEOUT_PARTIAL}({len(self.nodes)})"
        return self.outcome


@dataclass(frozen=True)
class ENRResult:
    compressed_key: bytes
    endpoint: Optional[Endpoint]
    seq: int
    size: int


@dataclass
class Outbound:
    data: bytes
    addr: Addr
    kind: str
    peer: Optional[bytes]
    body: object = None
    reply: bool = True


@dataclass
class InboundResult:
    packet: Optional[DiscoveryPacket]
    outbound: List[Outbound] = field(default_factory=list)
    events: List[dict] = field(default_factory=list)

    @property
    def replies(self) -> List[Outbound]:
        return [o for o in self.outbound if o.reply]


def addr_str(addr: Addr) -> str:
    ip, port = addr[0], addr[1]
    return f"[{ip}]:{port}" if ":" in ip else f"{ip}:{port}"


def summarize(body) -> dict:
    if isinstance(body, Ping):
        out = {"from": _ep(body.from_endpoint), "to": _ep(body.to_endpoint),
               "expiration": body.expiration}
        if body.enr_seq is not None:
            out["enrSeq"] = body.enr_seq
        return out
    if isinstance(body, Pong):
        return {"to": _ep(body.to_endpoint), "pingHash": body.ping_hash.hex(),
                "expiration": body.expiration}
    if isinstance(body, FindNode):
        return {"target": body.target.hex(), "expiration": body.expiration}
    if isinstance(body, Neighbors):
        return {"nodes": [dict(_ep(n.endpoint), id=n.node_id.hex()) for n in body.nodes],
                "expiration": body.expiration}
    if isinstance(body, ENRRequest):
        return {"expiration": body.expiration}
    if isinstance(body, ENRResponse):
        key = body.record.compressed_key
        return {"requestHash": body.request_hash.hex(), "seq": body.record.seq,
                "key": key.hex() if isinstance(key, bytes) else None}
    return {}


def _ep(ep: Endpoint) -> dict:
    return {"ip": ep.ip, "udp": ep.udp_port, "tcp": ep.tcp_port}


class DiscoveryNode:
    def __init__(self, private_key: bytes, endpoint: Endpoint, transport=None, *,
                 clock: Callable[[], float], config: Optional[DiscoveryConfig] = None,
                 rng: Optional[random.Random] = None, emit: Optional[EventFn] = None,
                 record_seq: int = 1) -> None:
        self.private_key = private_key
        self.identity = codec.derive_identity(private_key)
        self.endpoint = endpoint
        self.transport = transport
        self.clock = clock
        self.config = config or DiscoveryConfig()
        self.rng = rng or random.Random(0)
        self.emit: EventFn = emit or (lambda ev: None)
        self.table = RoutingTable(self.identity.table_key, self.config.bucket_capacity)
        self.bonds: Dict[bytes, BondState] = {}
        self.limiter = RateLimiter(self.config.rate_per_peer_per_minute, 60.0)
        # called with every node learned from an inbound Ping or a Neighbors reply
        self.on_seen: List[Callable[[Node, str], None]] = []
        # endpoint claimed in our own Pings; differs from ``endpoint`` behind a confused NAT
        self.claimed_endpoint = endpoint
        self._record_seq = record_seq
        self._record: Optional[NodeRecord] = None
        self._pending_pings: Dict[bytes, Tuple[bytes, float, List[asyncio.Future], Optional[Endpoint]]] = {}
        self._ping_waiters: Dict[bytes, List[asyncio.Future]] = {}
        self._neighbors: Dict[bytes, NeighborsAccumulator] = {}
        self._pending_enr: Dict[bytes, Tuple[bytes, asyncio.Future]] = {}
        self._lookup_slots: Optional[asyncio.Semaphore] = None
        self._tasks: List[asyncio.Task] = []

    # -- helpers --------------------------------------------------------

    @property
    def record(self) -> NodeRecord:
        if self._record is None:
            self._record = NodeRecord.create(self.private_key, self._record_seq, self.endpoint)
        return self._record

    def _expiration(self) -> int:
        return int(self.clock() + self.config.expiration)

    def _expired(self, body) -> bool:
        exp = getattr(body, "expiration", None)
        return exp is not None and exp < self.clock()

    def bond_state(self, node_id: bytes) -> BondState:
        return self.bonds.setdefault(node_id, BondState())

    def is_bonded(self, node_id: bytes) -> bool:
        """Peer proved its endpoint to us (answered our ping) recently."""
        st = self.bonds.get(node_id)
        return (st is not None and st.last_pong_received is not None
                and self.clock() - st.last_pong_received <= self.config.bond_window)

    def _ping_fresh(self, node_id: bytes) -> bool:
        st = self.bonds.get(node_id)
        return (st is not None and st.last_ping_received is not None
                and self.clock() - st.last_ping_received <= self.config.bond_window)

    def _make(self, body, addr: Addr, peer: Optional[bytes], reply: bool) -> Outbound:
        return Outbound(codec.encode_packet(body, self.private_key), addr, type(body).__name__,
                        peer, body, reply)

    def _send(self, out: Outbound) -> None:
        self.emit({"type": "message", "dir": "out", "layer": "discovery", "kind": out.kind,
                   "peer": out.peer.hex() if out.peer else None, "addr": addr_str(out.addr),
                   "size": len(out.data), "hash": out.data[:32].hex(),
                   "body": summarize(out.body)})
        if self.transport is not None:
            self.transport.sendto(out.data, out.addr)

    def _new_ping(self, addr: Addr, peer: bytes, tcp_port: int,
                  fut: Optional[asyncio.Future], endpoint: Optional[Endpoint]) -> Outbound:
        body = Ping(self.claimed_endpoint, Endpoint(addr[0], addr[1], tcp_port), self._expiration(),
                    self._record_seq)
        out = self._make(body, addr, peer, reply=False)
        # signatures are deterministic, so a second identical Ping shares the first one's hash
        key = out.data[:32]
        prev = self._pending_pings.get(key)
        waiters = prev[2] if prev else []
        if fut is not None:
            waiters.append(fut)
        self._pending_pings[key] = (peer, self.clock() + self.config.response_timeout, waiters,
                                    endpoint or (prev[3] if prev else None))
        return out

    # -- inbound --------------------------------------------------------

    def datagram_received(self, data: bytes, addr: Addr) -> None:
        result = self.handle_inbound(data, addr)
        for ev in result.events:
            self.emit(ev)
        for out in result.outbound:
            self._send(out)

    def handle_inbound(self, data: bytes, addr: Addr) -> InboundResult:
        now = self.clock()
        try:
            packet = codec.decode_packet(data)
        except codec.CodecError as exc:
            return InboundResult(None, [], [{
                "type": "session", "kind": "DecodeError", "error": type(exc).__name__,
                "detail": str(exc), "addr": addr_str(addr), "size": len(data)}])
        sender = packet.sender
        body = packet.body
        res = InboundResult(packet)
        res.events.append({
            "type": "message", "dir": "in", "layer": "discovery", "kind": packet.kind,
            "peer": sender.hex, "addr": addr_str(addr), "size": len(data),
            "hash": packet.packet_hash.hex(), "body": summarize(body)})
        if sender.node_id == self.identity.node_id:
            return res
        if self._expired(body):
            res.events.append({"type": "session", "kind": "Expired", "peer": sender.hex,
                               "packet": packet.kind})
            return res
        handler = getattr(self, "_on_" + packet.kind)
        handler(packet, addr, now, res)
        return res

    def _on_Ping(self, packet: DiscoveryPacket, addr: Addr, now: float, res: InboundResult) -> None:
        body: Ping = packet.body
        nid = packet.sender.node_id
        # the reply goes to the socket source, never the claimed from-endpoint
        to = Endpoint(addr[0], addr[1], body.from_endpoint.tcp_port)
        pong = Pong(to, packet.packet_hash, self._expiration(), self._record_seq)
        res.outbound.append(self._make(pong, addr, nid, reply=True))
        st = self.bond_state(nid)
        st.last_ping_received = now
        for fut in self._ping_waiters.pop(nid, []):
            if not fut.done():
                fut.set_result(True)
        for cb in self.on_seen:
            cb(Node(packet.sender, to), "Ping")
        if self.is_bonded(nid):
            self._touch(packet.sender, to, now)
        else:
            res.outbound.append(self._new_ping(addr, nid, body.from_endpoint.tcp_port, None, to))

    def _on_Pong(self, packet: DiscoveryPacket, addr: Addr, now: float, res: InboundResult) -> None:
        body: Pong = packet.body
        pending = self._pending_pings.pop(body.ping_hash, None)
        nid = packet.sender.node_id
        if pending is None or pending[0] != nid or pending[1] < now:
            res.events.append({"type": "session", "kind": "Unsolicited", "peer": packet.sender.hex,
                               "packet": "Pong"})
            return
        _, _, waiters, endpoint = pending
        self.bond_state(nid).last_pong_received = now
        ep = endpoint or Endpoint(addr[0], addr[1], addr[1])
        self._touch(packet.sender, ep, now)
        for fut in waiters:
            if not fut.done():
                fut.set_result(True)

    def _touch(self, identity: NodeIdentity, endpoint: Endpoint, now: float) -> None:
        st = self.bonds.get(identity.node_id)
        entry = TableEntry(identity, endpoint, st.last_pong_received if st else None,
                           st.last_ping_received if st else None, now)
        self.table.upsert(entry)

    def neighbors_reply(self, requester: NodeIdentity, target: bytes) -> List[List[NeighborNode]]:
        """Node lists, one per Neighbors datagram, answering a FindNode."""
        closest = self.table.closest(crypto.keccak256(target), codec.MAX_NEIGHBORS)
        nodes = [NeighborNode(e.endpoint, e.identity.node_id) for e in closest]
        return [list(b.nodes) for b in codec.split_neighbors(nodes, self._expiration())]

    def _on_FindNode(self, packet: DiscoveryPacket, addr: Addr, now: float, res: InboundResult) -> None:
        nid = packet.sender.node_id
        if not self.is_bonded(nid):
            res.events.append({"type": "session", "kind": "UnbondedFindNode", "peer": packet.sender.hex})
            return
        batches = self.neighbors_reply(packet.sender, packet.body.target)
        if len(batches) > self.config.max_neighbors_datagrams:
            log.warning("reply wants %d Neighbors datagrams; capping at %d", len(batches),
                        self.config.max_neighbors_datagrams)
            batches = batches[: self.config.max_neighbors_datagrams]
        total = 0
        for nodes in batches:
            nodes = nodes[: codec.MAX_NEIGHBORS - total]
            total += len(nodes)
            res.outbound.append(self._make(Neighbors(tuple(nodes), self._expiration()), addr, nid, True))

    def _on_Neighbors(self, packet: DiscoveryPacket, addr: Addr, now: float, res: InboundResult) -> None:
        nid = packet.sender.node_id
        acc = self._neighbors.get(nid)
        if acc is None or now > acc.deadline:
            res.events.append({"type": "session", "kind": "Unsolicited", "peer": packet.sender.hex,
                               "packet": "Neighbors"})
            return
        nodes = [n for n in packet.body.nodes if n.node_id != self.identity.node_id]
        if acc.add(nodes) and acc.done is not None and not acc.done.done():
            acc.done.set_result(True)

    def _on_ENRRequest(self, packet: DiscoveryPacket, addr: Addr, now: float, res: InboundResult) -> None:
        nid = packet.sender.node_id
        if not self.is_bonded(nid):
            res.events.append({"type": "session", "kind": "UnbondedENRRequest", "peer": packet.sender.hex})
            return
        resp = ENRResponse(packet.packet_hash, self.record)
        res.outbound.append(self._make(resp, addr, nid, True))

    def _on_ENRResponse(self, packet: DiscoveryPacket, addr: Addr, now: float, res: InboundResult) -> None:
        pending = self._pending_enr.pop(packet.body.request_hash, None)
        if pending is None or pending[0] != packet.sender.node_id:
            res.events.append({"type": "session", "kind": "Unsolicited", "peer": packet.sender.hex,
                               "packet": "ENRResponse"})
            return
        fut = pending[1]
        if not fut.done():
            fut.set_result(packet)

    # -- outbound requests ----------------------------------------------

    async def ping(self, node: Node) -> bool:
        loop = asyncio.get_running_loop()
        fut = loop.create_future()
        out = self._new_ping(node.endpoint.udp_addr, node.node_id, node.endpoint.tcp_port, fut,
                             node.endpoint)
        self._send(out)
        try:
            await asyncio.wait_for(fut, self.config.response_timeout)
            return True
        except asyncio.TimeoutError:
            pending = self._pending_pings.get(out.data[:32])
            if pending is not None and pending[1] <= self.clock():
                del self._pending_pings[out.data[:32]]
            return False

    async def bond(self, node: Node) -> bool:
        """Make sure both sides hold a fresh endpoint proof for each other."""
        nid = node.node_id
        if self.is_bonded(nid) and self._ping_fresh(nid):
            return True
        if not self.is_bonded(nid) and not await self.ping(node):
            return False
        if not self._ping_fresh(nid):
            # wait for the peer's own ping so it has processed our pong
            fut = asyncio.get_running_loop().create_future()
            self._ping_waiters.setdefault(nid, []).append(fut)
            try:
                await asyncio.wait_for(fut, self.config.response_timeout)
            except asyncio.TimeoutError:
                pass
        return True

    async def find_node_and_wait(self, node: Node, target: bytes) -> FindNodeResult:
        """Send FindNode and wait for 16 nodes or the neighbors timeout."""
        if self.limiter.check(node.node_id, self.clock()) == DENY:
            raise RateLimited(f"FindNode budget exhausted for {node.identity.hex[:16]}")
        start_bond = self.clock()
        if not await self.bond(node):
            failed = FindNodeResult((), TIMEOUT_EMPTY, _elapsed(self.clock(), start_bond))
            self._emit_findnode(node, failed)
            return failed
        loop = asyncio.get_running_loop()
        start = self.clock()
        acc = NeighborsAccumulator(deadline=start + self.config.neighbors_timeout,
                                   done=loop.create_future())
        self._neighbors[node.node_id] = acc
        self._send(self._make(FindNode(target, self._expiration()), node.endpoint.udp_addr,
                              node.node_id, reply=False))
        try:
            await asyncio.wait_for(asyncio.shield(acc.done), self.config.neighbors_timeout)
        except asyncio.TimeoutError:
            pass
        finally:
            if self._neighbors.get(node.node_id) is acc:
                del self._neighbors[node.node_id]
        elapsed = _elapsed(self.clock(), start)
        nodes = tuple(Node.from_neighbor(n) for n in acc.received)
        if len(nodes) >= codec.MAX_NEIGHBORS:
            outcome = COMPLETE
        elif nodes:
            outcome = TIMEOUT_PARTIAL
        else:
            outcome = TIMEOUT_EMPTY
        result = FindNodeResult(nodes, outcome, elapsed, tuple(acc.datagrams))
        self._emit_findnode(node, result)
        for n in nodes:
            for cb in self.on_seen:
                cb(n, "Neighbors")
        return result

    def _emit_findnode(self, node: Node, result: FindNodeResult) -> None:
        self.emit({"type": "session", "kind": "FindNodeResult", "peer": node.identity.hex,
                   "outcome": result.outcome, "label": result.label, "elapsed": result.elapsed,
                   "nodes": len(result.nodes), "datagrams": list(result.datagrams)})

    async def lookup(self, target: bytes) -> List[Node]:
        """Iterative lookup for the nodes closest to ``target`` (64-byte id)."""
        if not len(self.table):
            raise EmptyTable("lookup needs a non-empty table")
        if self._lookup_slots is None:
            self._lookup_slots = asyncio.Semaphore(self.config.max_concurrent_lookups)
        async with self._lookup_slots:
            return await self._lookup(target)

    async def _lookup(self, target: bytes) -> List[Node]:
        started = self.clock()
        tkey = int.from_bytes(crypto.keccak256(target), "big")
        k = codec.MAX_NEIGHBORS

        def dist(n: Node) -> int:
            return int.from_bytes(n.identity.table_key, "big") ^ tkey

        seen: Dict[bytes, Node] = {}
        for e in self.table.closest(crypto.keccak256(target), k):
            seen[e.identity.node_id] = Node(e.identity, e.endpoint)
        asked: Set[bytes] = set()
        failed: Set[bytes] = set()
        running: Dict[asyncio.Task, Node] = {}
        while True:
            best = sorted((n for nid, n in seen.items() if nid not in failed), key=dist)[:k]
            for n in best:
                if len(running) >= self.config.alpha:
                    break
                if n.node_id in asked:
                    continue
                asked.add(n.node_id)
                task = asyncio.ensure_future(self._query(n, target))
                running[task] = n
            if not running:
                break
            done, _ = await asyncio.wait(list(running), return_when=asyncio.FIRST_COMPLETED)
            for task in sorted(done, key=lambda t: running[t].node_id):
                n = running.pop(task)
                result = task.result()
                if result is None or result.outcome == TIMEOUT_EMPTY:
                    failed.add(n.node_id)
                    continue
                for m in result.nodes:
                    if m.node_id != self.identity.node_id and m.node_id not in seen:
                        seen[m.node_id] = m
        final = sorted((n for nid, n in seen.items() if nid not in failed and nid in asked), key=dist)[:k]
        self.emit({"type": "session", "kind": "LookupResult", "target": target.hex(),
                   "asked": len(asked), "failed": len(failed), "elapsed": _elapsed(self.clock(), started),
                   "result": [n.identity.hex for n in final]})
        return final

    async def _query(self, node: Node, target: bytes) -> Optional[FindNodeResult]:
        try:
            return await self.find_node_and_wait(node, target)
        except RateLimited:
            return None

    async def resolve_enr(self, node: Node) -> ENRResult:
        if not self.is_bonded(node.node_id):
            raise Timeout("peer is not bonded; ENR request would go unanswered")
        loop = asyncio.get_running_loop()
        fut = loop.create_future()
        out = self._make(ENRRequest(self._expiration()), node.endpoint.udp_addr, node.node_id, False)
        self._pending_enr[out.data[:32]] = (node.node_id, fut)
        self._send(out)
        try:
            packet = await asyncio.wait_for(fut, self.config.response_timeout)
        except asyncio.TimeoutError:
            self._pending_enr.pop(out.data[:32], None)
            raise Timeout("no ENRResponse before the response timeout") from None
        record: NodeRecord = packet.body.record
        if not record.verify():
            raise BadRecordSignature("record signature does not verify")
        if record.identity != packet.sender:
            raise BadRecordSignature("record key does not match the packet signer")
        return ENRResult(record.compressed_key, record.endpoint, record.seq, packet.size)

    # -- maintenance ----------------------------------------------------

    async def revalidate_once(self) -> Optional[bool]:
        try:
            entry = self.table.pick_revalidation_target(self.rng)
        except Exception:
            return None
        ok = await self.ping(Node(entry.identity, entry.endpoint))
        if ok:
            self.table.revalidation_succeeded(entry.identity.node_id, self.clock())
        else:
            self.table.revalidation_failed(entry.identity.node_id)
        return ok

    def random_target(self) -> bytes:
        return self.rng.randbytes(64)

    async def _refresh_loop(self) -> None:
        while True:
            if len(self.table):
                try:
                    await self.lookup(self.random_target())
                except (DiscoveryError, OSError) as exc:
                    log.warning("refresh lookup failed: %s", exc)
            await asyncio.sleep(self.config.table_refresh)

    async def _revalidate_loop(self) -> None:
        while True:
            await asyncio.sleep(self.config.revalidate_interval)
            await self.revalidate_once()

    def start(self) -> None:
        """One refresh loop per allowed concurrent lookup, plus revalidation."""
        self._tasks = [asyncio.ensure_future(self._refresh_loop())
                       for _ in range(self.config.max_concurrent_lookups)]
        self._tasks.append(asyncio.ensure_future(self._revalidate_loop()))

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._tasks = []

    def add_bootnode(self, node: Node) -> None:
        self.table.upsert(TableEntry(node.identity, node.endpoint, added_at=self.clock()))


def _elapsed(now: float, since: float) -> float:
    # epoch-scale floats carry ~1e-7 noise; microseconds are plenty
    return round(now - since, 6)


def closest_by_distance(nodes, target_key: bytes, k: int) -> list:
    t = int.from_bytes(target_key, "big")
    return sorted(nodes, key=lambda n: int.from_bytes(n.identity.table_key, "big") ^ t)[:k]


__all__ = [
    "DiscoveryConfig", "DiscoveryNode", "Node", "RateLimiter", "ALLOW", "DENY", "FindNodeResult",
    "RateLimited", "Timeout", "BadRecordSignature", "EmptyTable", "COMPLETE", "TIMEOUT_PARTIAL",
    "TIMEOUT_EMPTY", "xor_distance", "closest_by_distance",
]
