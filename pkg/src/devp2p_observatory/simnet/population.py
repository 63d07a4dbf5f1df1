"""Scripted peers: identities, synthetic endpoints, seeded tables and behavior."""
from __future__ import annotations

import asyncio
import ipaddress
import random
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

from .. import codec, crypto
from ..codec import Endpoint, NeighborNode, Neighbors, NodeIdentity, TOO_MANY_PEERS
from ..discovery import DiscoveryConfig, DiscoveryNode, Node
from ..forkid import ChainConfig, Head, chain_by_name
from ..rlpx import LoopbackChannel
from ..session import SessionConfig, accept_session
from ..table import TableEntry
from .fabric import Fabric
from .profiles import BehaviorProfile

# documentation ranges only, so nothing built here can reach a real host
_TEST_NETS = ("192.0.2.0/24", "198.51.100.0/24", "203.0.113.0/24")
OBSERVER_IP = "192.0.2.1"
BASE_PORT = 30303


def _address_pool() -> List[str]:
    pool = [str(h) for net in _TEST_NETS for h in ipaddress.ip_network(net).hosts()]
    pool.remove(OBSERVER_IP)
    return pool


ADDRESS_POOL = _address_pool()


def synthetic_endpoint(index: int) -> Endpoint:
    ip = ADDRESS_POOL[index % len(ADDRESS_POOL)]
    port = BASE_PORT + 1 + index // len(ADDRESS_POOL)
    return Endpoint(ip, port, port)


class ProfiledDiscovery(DiscoveryNode):
    """Discovery endpoint whose Neighbors replies follow a behavior profile."""

    def __init__(self, *args, profile: BehaviorProfile, family_of: Callable[[bytes], Optional[str]],
                 **kw) -> None:
        super().__init__(*args, **kw)
        self.profile = profile
        self.family_of = family_of

    def _listable(self, node_id: bytes) -> bool:
        if self.profile.table_filter == "same_family":
            return self.family_of(node_id) == self.profile.family
        return True

    def neighbors_reply(self, requester: NodeIdentity, target: bytes) -> List[List[NeighborNode]]:
        lengths = self.profile.neighbors_reply_lengths
        want = sum(lengths)
        ranked = self.table.closest(crypto.keccak256(target), len(self.table))
        picked = [NeighborNode(e.endpoint, e.identity.node_id) for e in ranked
                  if e.identity.node_id != requester.node_id and self._listable(e.identity.node_id)][:want]
        batches: List[List[NeighborNode]] = []
        i = 0
        for n in lengths:
            chunk = picked[i:i + n]
            i += n
            if chunk:
                batches.extend(_fit(chunk, self._expiration()))
        return batches


def _fit(chunk: List[NeighborNode], expiration: int) -> List[List[NeighborNode]]:
    """Split a scripted datagram only if it would break the packet size limit."""
    if codec.encoded_size(Neighbors(tuple(chunk), expiration)) <= codec.MAX_PACKET_SIZE or len(chunk) == 1:
        return [chunk]
    half = len(chunk) // 2
    return _fit(chunk[:half], expiration) + _fit(chunk[half:], expiration)


@dataclass
class SimPeer:
    index: int
    key: bytes
    identity: NodeIdentity
    endpoint: Endpoint
    profile: BehaviorProfile
    chain: ChainConfig
    join_at: float = 0.0
    discovery: Optional[ProfiledDiscovery] = None
    sessions: int = 0
    active: int = 0

    @property
    def node(self) -> Node:
        return Node(self.identity, self.endpoint)

    @property
    def node_id(self) -> bytes:
        return self.identity.node_id


class Population:
    """The simulated network: every scripted peer plus the fabric they share."""

    def __init__(self, fabric: Fabric, clock: Callable[[], float], rng: random.Random,
                 head: Head, discovery_config: Optional[DiscoveryConfig] = None) -> None:
        self.fabric = fabric
        self.clock = clock
        self.rng = rng
        self.head = head
        self.discovery_config = discovery_config or DiscoveryConfig()
        self.peers: List[SimPeer] = []
        self.by_id: Dict[bytes, SimPeer] = {}
        self._tasks: List[asyncio.Task] = []

    def family_of(self, node_id: bytes) -> Optional[str]:
        p = self.by_id.get(node_id)
        return p.profile.family if p else None

    def add(self, profile: BehaviorProfile, join_at: float = 0.0) -> SimPeer:
        index = len(self.peers)
        key = crypto.generate_private_key(self.rng)
        identity = codec.derive_identity(key)
        peer = SimPeer(index, key, identity, synthetic_endpoint(index), profile,
                       chain_by_name(profile.chain), join_at)
        self.peers.append(peer)
        self.by_id[identity.node_id] = peer
        return peer

    def add_many(self, profile: BehaviorProfile, count: int, join_at: float = 0.0,
                 join_spread: float = 0.0) -> List[SimPeer]:
        out = []
        for i in range(count):
            at = join_at + (join_spread * i / count if join_spread and count else 0.0)
            out.append(self.add(profile, at))
        return out

    # -- tables ---------------------------------------------------------

    def seed_tables(self, per_bucket: int = 16) -> None:
        """Give every peer a table of other peers, at most ``per_bucket`` per distance.

        Candidates are visited in a seeded shuffle so which peers fill a
        crowded far bucket is random but reproducible. Peers with a
        same-family filter only learn peers of their own family.
        """
        keys = [int.from_bytes(p.identity.table_key, "big") for p in self.peers]
        for i, p in enumerate(self.peers):
            order = list(range(len(self.peers)))
            self.rng.shuffle(order)
            counts: Dict[int, int] = {}
            mine = keys[i]
            chosen = []
            for j in order:
                if j == i:
                    continue
                q = self.peers[j]
                if p.profile.table_filter == "same_family" and q.profile.family != p.profile.family:
                    continue
                b = max(0, (mine ^ keys[j]).bit_length() - 240)
                c = counts.get(b, 0)
                if c < per_bucket:
                    counts[b] = c + 1
                    chosen.append(q)
            table = p.discovery.table if p.discovery else None
            if table is None:
                raise RuntimeError("start peers before seeding tables")
            for q in chosen:
                table.upsert(TableEntry(q.identity, q.endpoint, None, None, 0.0))

    def knows(self, peer: SimPeer) -> List[SimPeer]:
        return [self.by_id[e.identity.node_id] for e in peer.discovery.table
                if e.identity.node_id in self.by_id]

    # -- lifecycle ------------------------------------------------------

    def bring_up(self, peer: SimPeer) -> None:
        """Create the peer's discovery endpoint and listeners (idempotent)."""
        if peer.discovery is not None:
            return
        disc = ProfiledDiscovery(peer.key, peer.endpoint, None, clock=self.clock,
                                 config=self.discovery_config, rng=random.Random(peer.index),
                                 profile=peer.profile, family_of=self.family_of)
        if peer.profile.false_from_ip:
            ep = peer.endpoint
            disc.claimed_endpoint = Endpoint(peer.profile.false_from_ip, ep.udp_port, ep.tcp_port)
        if peer.profile.udp_responsive:
            disc.transport = self.fabric.bind_udp(peer.endpoint.udp_addr, disc.datagram_received)
        if peer.profile.tcp_reachable:
            self.fabric.listen_tcp((peer.endpoint.ip, peer.endpoint.tcp_port),
                                   lambda r, w, remote, p=peer: self._accept(p, r, w, remote))
        peer.discovery = disc

    def session_config(self, peer: SimPeer) -> SessionConfig:
        prof = peer.profile
        head = Head(0, peer.chain.genesis_time) if prof.head == "genesis" else self.head
        return SessionConfig(prof.client_id, prof.capabilities, peer.chain, head,
                             listen_port=peer.endpoint.tcp_port, hold=prof.session_hold,
                             reasons=prof.reasons(),
                             silent_close_probability=prof.silent_close_probability)

    async def _accept(self, peer: SimPeer, reader, writer, remote) -> None:
        refuse = None
        if peer.profile.max_peers is not None and peer.active >= peer.profile.max_peers:
            refuse = TOO_MANY_PEERS
        peer.sessions += 1
        peer.active += 1
        try:
            await accept_session(reader, writer, LoopbackChannel, peer.key, self.session_config(peer),
                                 clock=self.clock, rng=random.Random(peer.index * 1_000_003 + peer.sessions),
                                 addr=f"{remote[0]}:{remote[1]}", refuse_reason=refuse)
        finally:
            peer.active -= 1

    async def announce(self, peer: SimPeer, to: Node) -> None:
        """Ping ``to`` at the peer's join time, the way a fresh node bootstraps."""
        delay = peer.join_at - (asyncio.get_running_loop().time())
        if delay > 0:
            await asyncio.sleep(delay)
        self.bring_up(peer)
        if peer.profile.udp_responsive:
            await peer.discovery.ping(to)

    def schedule_announcements(self, to: Node, peers: Optional[Sequence[SimPeer]] = None) -> None:
        for p in (self.peers if peers is None else peers):
            self._tasks.append(asyncio.ensure_future(self.announce(p, to)))

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._tasks.clear()


def oracle_closest(population: Population, seeds: Sequence[bytes], target: bytes, k: int = 16) -> List[bytes]:
    """Brute-force answer for a lookup of ``target`` starting from ``seeds``.

    Every peer reachable from the seeds through table edges (and answering
    discovery traffic) is a candidate; candidates are sorted by XOR distance
    between their table key and keccak256(target).
    """
    tkey = int.from_bytes(crypto.keccak256(target), "big")
    reach: Dict[bytes, SimPeer] = {}
    frontier = [population.by_id[s] for s in seeds if s in population.by_id]
    while frontier:
        p = frontier.pop()
        if p.node_id in reach or not p.profile.udp_responsive:
            continue
        reach[p.node_id] = p
        for e in p.discovery.table:
            q = population.by_id.get(e.identity.node_id)
            if q is not None and q.node_id not in reach and p.discovery._listable(q.node_id):
                frontier.append(q)
    ranked = sorted(reach.values(), key=lambda p: int.from_bytes(p.identity.table_key, "big") ^ tkey)
    return [p.node_id for p in ranked[:k]]


__all__ = ["Population", "SimPeer", "ProfiledDiscovery", "oracle_closest", "synthetic_endpoint",
           "OBSERVER_IP", "ADDRESS_POOL"]
