import asyncio
import random

import pytest

from devp2p_observatory import codec, crypto
from devp2p_observatory.clock import run_virtual
from devp2p_observatory.codec import Endpoint, FindNode, NeighborNode, Ping
from devp2p_observatory.discovery import (ALLOW, COMPLETE, DENY, TIMEOUT_EMPTY, TIMEOUT_PARTIAL, DiscoveryConfig,
                                          DiscoveryNode, EmptyTable, Node, RateLimited, RateLimiter)
from devp2p_observatory.simnet.fabric import Fabric
from devp2p_observatory.table import TableEntry


class Scripted(DiscoveryNode):
    """Replies with fixed datagram sizes drawn from its table."""

    lengths = (12, 4)

    def neighbors_reply(self, requester, target):
        nodes = [NeighborNode(e.endpoint, e.identity.node_id) for e in self.table
                 if e.identity != requester][:sum(self.lengths)]
        out, i = [], 0
        for n in self.lengths:
            out.append(nodes[i:i + n])
            i += n
        return out


def make_net(n_peers=3, lengths=(12, 4), filler=20, config=None):
    loop = asyncio.get_running_loop()
    fabric = Fabric(loop)
    r = random.Random(42)
    events = []

    def node(cls, i, emit=None):
        ep = Endpoint(f"192.0.2.{i + 1}", 30303, 30303)
        d = cls(crypto.generate_private_key(r), ep, clock=loop.time, config=config or DiscoveryConfig(),
                emit=emit)
        d.transport = fabric.bind_udp(ep.udp_addr, d.datagram_received)
        return d

    me = node(DiscoveryNode, 0, events.append)
    peers = []
    for i in range(n_peers):
        p = node(Scripted, i + 1)
        p.lengths = lengths
        peers.append(p)
    for j in range(filler):
        ident = codec.derive_identity(crypto.generate_private_key(r))
        for p in peers:
            p.table.upsert(TableEntry(ident, Endpoint("198.51.100.7", 30303 + j, 30303 + j), 0.0))
    return fabric, me, peers, events


def as_node(d):
    return Node(d.identity, d.endpoint)


def test_limiter_window_edges():
    lim = RateLimiter(10, 60.0)
    assert [lim.check(b"p", float(t)) for t in range(10)] == [ALLOW] * 10
    assert lim.check(b"p", 59.9) == DENY
    assert lim.check(b"q", 59.9) == ALLOW
    assert lim.check(b"p", 60.0) == ALLOW  # the first hit left the half-open window


def test_pong_goes_to_socket_source_not_claimed_endpoint():
    r = random.Random(1)
    me = DiscoveryNode(crypto.generate_private_key(r), Endpoint("192.0.2.1", 30303, 30303), clock=lambda: 100.0)
    them = crypto.generate_private_key(r)
    ping = Ping(Endpoint("127.0.0.1", 30303, 30303), me.endpoint, 200)
    res = me.handle_inbound(codec.encode_packet(ping, them), ("203.0.113.5", 30311))
    pong = res.replies[0]
    assert pong.kind == "Pong" and pong.addr == ("203.0.113.5", 30311)
    assert pong.body.to_endpoint.ip == "203.0.113.5"
    assert pong.body.ping_hash == res.packet.packet_hash
    # an unbonded sender also gets a ping of ours so it can prove its endpoint
    assert [o.kind for o in res.outbound] == ["Pong", "Ping"]


def test_expired_and_unbonded_requests_are_dropped():
    r = random.Random(2)
    me = DiscoveryNode(crypto.generate_private_key(r), Endpoint("192.0.2.1", 30303, 30303), clock=lambda: 100.0)
    them = crypto.generate_private_key(r)
    res = me.handle_inbound(codec.encode_packet(FindNode(b"\x01" * 64, 99), them), ("203.0.113.5", 1))
    assert res.outbound == [] and res.events[-1]["kind"] == "Expired"
    res = me.handle_inbound(codec.encode_packet(FindNode(b"\x01" * 64, 200), them), ("203.0.113.5", 1))
    assert res.outbound == [] and res.events[-1]["kind"] == "UnbondedFindNode"
    res = me.handle_inbound(b"\x00" * 120, ("203.0.113.5", 1))
    assert res.packet is None and res.events[0]["error"] == "BadHash"


def test_complete_exchange_with_twelve_plus_four():
    async def main():
        fabric, me, peers, events = make_net(1)
        return await me.find_node_and_wait(as_node(peers[0]), b"\x05" * 64)

    res = run_virtual(main)
    assert res.outcome == COMPLETE and res.datagrams == (12, 4) and len(res.nodes) == 16
    assert res.elapsed < 0.1


def test_twelve_node_reply_times_out_partial():
    async def main():
        fabric, me, peers, events = make_net(1, lengths=(12,))
        return await me.find_node_and_wait(as_node(peers[0]), b"\x05" * 64)

    res = run_virtual(main)
    assert res.outcome == TIMEOUT_PARTIAL and res.label == "TimeoutPartial(12)"
    assert res.elapsed == 1.5


def test_silent_peer_times_out_empty():
    async def main():
        fabric, me, peers, events = make_net(0)
        ghost = Node(codec.derive_identity(crypto.generate_private_key(random.Random(9))),
                     Endpoint("203.0.113.99", 30303, 30303))
        return await me.find_node_and_wait(ghost, b"\x05" * 64)

    assert run_virtual(main).outcome == TIMEOUT_EMPTY


def test_findnode_rate_limited_per_peer():
    async def main():
        fabric, me, peers, events = make_net(1)
        for _ in range(10):
            await me.find_node_and_wait(as_node(peers[0]), b"\x05" * 64)
        with pytest.raises(RateLimited):
            await me.find_node_and_wait(as_node(peers[0]), b"\x05" * 64)
        await asyncio.sleep(60)
        return await me.find_node_and_wait(as_node(peers[0]), b"\x05" * 64)

    assert run_virtual(main).outcome == COMPLETE


def test_reply_capped_at_four_datagrams():
    async def main():
        fabric, me, peers, events = make_net(1, lengths=(2, 2, 2, 2, 2, 2))
        return await me.find_node_and_wait(as_node(peers[0]), b"\x05" * 64)

    res = run_virtual(main)
    assert res.datagrams == (2, 2, 2, 2) and res.outcome == TIMEOUT_PARTIAL


def test_resolve_enr_checks_record():
    async def main():
        fabric, me, peers, events = make_net(1)
        await me.bond(as_node(peers[0]))
        return await me.resolve_enr(as_node(peers[0]))

    res = run_virtual(main)
    assert res.endpoint == Endpoint("192.0.2.2", 30303, 30303)
    assert len(res.compressed_key) == 33


def test_lookup_needs_a_table():
    async def main():
        fabric, me, peers, events = make_net(0)
        with pytest.raises(EmptyTable):
            await me.lookup(b"\x00" * 64)

    run_virtual(main)


def test_lookup_converges_on_closest_known():
    async def main():
        fabric, me, peers, events = make_net(3, filler=0)
        # fully connected: each peer knows the others
        for p in peers:
            for q in peers:
                if p is not q:
                    p.table.upsert(TableEntry(q.identity, q.endpoint, 0.0))
        me.add_bootnode(as_node(peers[0]))
        return await me.lookup(b"\x07" * 64), events

    found, events = run_virtual(main)
    assert len(found) == 3
    assert events[-1]["kind"] == "LookupResult" and events[-1]["asked"] == 3


def test_revalidation_evicts_silent_entry():
    async def main():
        fabric, me, peers, events = make_net(0)
        ghost = codec.derive_identity(crypto.generate_private_key(random.Random(3)))
        me.table.upsert(TableEntry(ghost, Endpoint("203.0.113.1", 1, 1)))
        ok = await me.revalidate_once()
        return ok, len(me.table)

    assert run_virtual(main) == (False, 0)
