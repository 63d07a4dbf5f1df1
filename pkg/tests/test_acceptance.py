"""Acceptance gate: one or more tests per criterion, summarized as one line each.

The terminal summary (see conftest) prints ``criterion N: PASS|FAIL`` for
criteria 1 to 12. Criterion 2 is split into its two halves, 2a and 2b.
"""
import asyncio
import random
import time
from collections import defaultdict

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from devp2p_observatory import codec, crypto
from devp2p_observatory.clock import VirtualTimeLoop
from devp2p_observatory.codec import (ENRRequest, ENRResponse, Endpoint, FindNode, ForkId, Hello, NodeIdentity,
                                      NeighborNode, Neighbors, NodeRecord, Ping, Pong, Status)
from devp2p_observatory.discovery import ALLOW, Node, RateLimiter
from devp2p_observatory.forkid import MAINNET, MAINNET_HEAD, compute_fork_hash
from devp2p_observatory.observer import DialScheduler
from devp2p_observatory.render import table_csv
from devp2p_observatory.simnet.scenario import BUNDLED, load_scenario, parse_scenario, run_scenario
from devp2p_observatory.table import RoutingTable, TableEntry

criterion = pytest.mark.criterion

_RUNS = {}


def scenario(name):
    """First run of a bundled scenario, shared by every test in the session."""
    if name not in _RUNS:
        _RUNS[name] = run_scenario(load_scenario(name))
    return _RUNS[name]


# -- 1: codec round-trip ------------------------------------------------------

N_PER_KIND = 1000
_KEYS = [crypto.generate_private_key(random.Random(i)) for i in range(32)]


def _rand_endpoint(r):
    if r.random() < 0.5:
        ip = ".".join(str(r.randrange(256)) for _ in range(4))
    else:
        ip = ":".join(f"{r.randrange(65536):x}" for _ in range(8))
    return Endpoint(ip, r.randrange(65536), r.randrange(65536))


def _rand_body(kind, r):
    exp = r.randrange(2 ** 32)
    if kind == "Ping":
        return Ping(_rand_endpoint(r), _rand_endpoint(r), exp, r.choice([None, r.randrange(2 ** 64)]))
    if kind == "Pong":
        return Pong(_rand_endpoint(r), r.randbytes(32), exp, r.choice([None, r.randrange(2 ** 64)]))
    if kind == "FindNode":
        return FindNode(r.randbytes(64), exp)
    if kind == "Neighbors":
        n = r.randrange(codec.max_neighbors_per_packet() + 1)
        return Neighbors(tuple(NeighborNode(_rand_endpoint(r), r.randbytes(64)) for _ in range(n)), exp)
    if kind == "ENRRequest":
        return ENRRequest(exp)
    if kind == "ENRResponse":
        rec = NodeRecord.create(r.choice(_KEYS), r.randrange(2 ** 32), _rand_endpoint(r))
        return ENRResponse(r.randbytes(32), rec)
    raise ValueError(kind)


def _rand_message(kind, r):
    if kind == "Hello":
        caps = tuple(sorted({(r.choice(["eth", "snap", "les", "wit"]), r.randrange(1, 100))
                             for _ in range(r.randrange(4))}))
        client = "".join(r.choice("abcdefgh/v1.2-xyz") for _ in range(r.randrange(40)))
        return Hello(client, caps, r.randrange(65536), r.randbytes(64), r.randrange(1, 256))
    if kind == "Disconnect":
        return codec.Disconnect(r.randrange(0x11))
    if kind == "Status":
        return Status(r.randrange(64, 70), r.randrange(1, 2 ** 63), r.randbytes(32),
                      ForkId(r.randbytes(4), r.randrange(2 ** 40)), r.randbytes(32), r.randrange(2 ** 100))
    raise ValueError(kind)


DISCOVERY_KINDS = ("Ping", "Pong", "FindNode", "Neighbors", "ENRRequest", "ENRResponse")
RLPX_KINDS = ("Hello", "Disconnect", "Status")
_C1_TIME = {}


@criterion(1, "codec round-trip, 1000 random instances per kind, < 30 s")
@pytest.mark.parametrize("kind", DISCOVERY_KINDS)
def test_c1_discovery_round_trip(kind):
    r = random.Random(f"c1-{kind}")
    start = time.perf_counter()
    for _ in range(N_PER_KIND):
        body = _rand_body(kind, r)
        key = r.choice(_KEYS)
        packet = codec.decode_packet(codec.encode_packet(body, key))
        assert packet.body == body
        assert packet.sender.node_id == crypto.private_to_public(key)
        if kind == "ENRResponse":
            assert packet.body.record.verify()
    _C1_TIME[kind] = time.perf_counter() - start


@criterion(1, "codec round-trip, 1000 random instances per kind, < 30 s")
@pytest.mark.parametrize("kind", RLPX_KINDS)
def test_c1_rlpx_round_trip(kind):
    r = random.Random(f"c1-{kind}")
    start = time.perf_counter()
    for _ in range(N_PER_KIND):
        msg = _rand_message(kind, r)
        assert codec.decode_capability_message(codec.encode_capability_message(msg)) == msg
    _C1_TIME[kind] = time.perf_counter() - start


@criterion(1, "codec round-trip, 1000 random instances per kind, < 30 s")
def test_c1_total_runtime():
    assert set(_C1_TIME) == set(DISCOVERY_KINDS + RLPX_KINDS), "round-trip tests did not all run"
    assert sum(_C1_TIME.values()) < 30.0, _C1_TIME


# -- 2: size law --------------------------------------------------------------


def _nodes(n, v6=False):
    r = random.Random(n)
    ip = "2001:db8::1" if v6 else "203.0.113.7"
    return tuple(NeighborNode(Endpoint(ip, 30303, 30303), r.randbytes(64)) for _ in range(n))


@criterion("2a", "size law: Neighbors with 16 IPv4 nodes encodes within 1280 bytes")
def test_c2a_sixteen_ipv4_nodes_fit():
    body = Neighbors(_nodes(16), int(time.time()) + 20)
    size = codec.encoded_size(body)
    assert size <= codec.MAX_PACKET_SIZE, f"16 IPv4 nodes encode to {size} bytes"
    assert len(codec.encode_packet(body, _KEYS[0])) <= codec.MAX_PACKET_SIZE


@criterion("2b", "size law: Neighbors with 13 IPv6 nodes raises OversizePacket")
def test_c2b_thirteen_ipv6_nodes_oversize():
    body = Neighbors(_nodes(13, v6=True), int(time.time()) + 20)
    with pytest.raises(codec.OversizePacket):
        codec.encode_packet(body, _KEYS[0])
    # and twelve still fit, so the boundary is exactly at 13
    assert len(codec.encode_packet(Neighbors(_nodes(12, v6=True), body.expiration), _KEYS[0])) <= 1280


# -- 3: fork id -----------------------------------------------------------------


@criterion(3, "fork id of mainnet through Cancun is 9f3d2254/0")
def test_c3_mainnet_fork_id():
    fid = MAINNET.fork_id(MAINNET_HEAD)
    assert fid.fork_hash.hex() == "9f3d2254"
    assert fid.fork_next == 0
    assert str(fid) == "9f3d2254/0"
    assert compute_fork_hash(oracles.MAINNET_GENESIS, MAINNET.forks).hex() == "9f3d2254"


# -- 4: timeout semantics -----------------------------------------------------


def _findnode_by_family(result):
    out = defaultdict(list)
    for ev in result.events:
        if ev.get("kind") == "FindNodeResult":
            peer = result.population.by_id[bytes.fromhex(ev["peer"])]
            out[peer.profile.neighbors_reply_lengths].append(ev)
    return out


@criterion(4, "twelve-node replies time out at 1.5 s, 12+4 replies finish under 100 ms")
def test_c4_twelve_node_profiles_time_out():
    by_lengths = _findnode_by_family(scenario("appendix_c_timeouts"))
    twelve = by_lengths[(12,)]
    assert len(twelve) == 10
    for ev in twelve:
        assert ev["label"] == "TimeoutPartial(12)"
        assert abs(ev["elapsed"] - 1.5) <= 0.001  # one 1 ms fabric tick


@criterion(4, "twelve-node replies time out at 1.5 s, 12+4 replies finish under 100 ms")
def test_c4_twelve_plus_four_completes_fast():
    by_lengths = _findnode_by_family(scenario("appendix_c_timeouts"))
    full = by_lengths[(12, 4)]
    assert len(full) == 10
    for ev in full:
        assert ev["label"] == "Complete16"
        assert ev["datagrams"] == [12, 4]
        assert ev["elapsed"] < 0.1


# -- 5: lookup vs oracle --------------------------------------------------------


@criterion(5, "lookups equal the oracle's top 16 in honest populations, < 60 s")
def test_c5_lookup_matches_oracle():
    start = time.perf_counter()
    checked = 0
    for n in (50, 200, 1000):
        for seed in range(1, 6):
            cfg = parse_scenario({
                "version": 1, "name": f"honest_{n}_{seed}", "seed": seed, "duration": 300.0,
                "observer": {"bootnodes": 3, "lookups": 2, "announce": False, "dial": False},
                "population": [{"profile": "geth", "count": n}]})
            result = run_scenario(cfg)
            assert len(result.lookups) == 2
            for lk in result.lookups:
                assert len(lk["result"]) == 16
                assert lk["result"] == lk["oracle"], f"n={n} seed={seed}"
                checked += 1
    assert checked == 30
    assert time.perf_counter() - start < 60.0


# -- 6: classification fidelity ---------------------------------------------------


@criterion(6, "dial-efficiency class mix within 2 points, %C non-increasing")
def test_c6_class_mix_at_first_checkpoint():
    rows = scenario("table7_dial_efficiency").report.dial_efficiency
    first = rows[0]
    assert first["attempts"] == 1000
    for col, want in (("pctA", 29.51), ("pctB", 57.42), ("pctC", 13.07)):
        assert abs(first[col] - want) <= 2.0, (col, first[col])


@criterion(6, "dial-efficiency class mix within 2 points, %C non-increasing")
def test_c6_pct_c_non_increasing():
    rows = scenario("table7_dial_efficiency").report.dial_efficiency
    assert [r["attempts"] for r in rows] == [1000, 2000, 4000, 6000]
    pct_c = [r["pctC"] for r in rows]
    assert all(a >= b for a, b in zip(pct_c, pct_c[1:])), pct_c
    assert pct_c[-1] < pct_c[0]


# -- 7: false IP --------------------------------------------------------------------


@criterion(7, "false_ip flags exactly the buggy peers, Pongs go to the socket source")
def test_c7_flags_exactly_buggy_peers():
    result = scenario("false_ip")
    buggy = {p.identity.hex for p in result.population.peers if p.profile.false_from_ip}
    assert len(buggy) == 10
    assert set(result.report.false_ip["peers"]) == buggy
    assert result.report.false_ip["claimedIps"] == {"127.0.0.1": 10}


@criterion(7, "false_ip flags exactly the buggy peers, Pongs go to the socket source")
def test_c7_pongs_addressed_to_socket_source():
    result = scenario("false_ip")
    by_hex = {p.identity.hex: p for p in result.population.peers}
    pongs = [ev for ev in result.events if ev.get("kind") == "Pong" and ev.get("dir") == "out"]
    assert len(pongs) >= 100
    for ev in pongs:
        peer = by_hex[ev["peer"]]
        assert ev["addr"] == f"{peer.endpoint.ip}:{peer.endpoint.udp_port}"
        assert ev["body"]["to"]["ip"] == peer.endpoint.ip
        assert ev["body"]["to"]["ip"] != "127.0.0.1"


# -- 8: disconnect taxonomy -----------------------------------------------------------

EXPECTED_DISCONNECTS_CSV = """reason,received,sent,pct
Disconnect requested,0,0,0.0
TCP sub-system error,0,0,0.0
Breach of protocol,20,0,40.0
Useless peer,20,0,40.0
Too many peers,10,0,20.0
Already connected,0,0,0.0
Client quitting,0,0,0.0
Ping timeout,0,0,0.0
Subprotocol reason,0,0,0.0
"""


@criterion(8, "disconnect_divergence buckets match the script exactly")
def test_c8_disconnect_buckets():
    result = scenario("disconnect_divergence")
    assert table_csv(result.report, "disconnects") == EXPECTED_DISCONNECTS_CSV
    fam = {(r["family"], r["reason"], r["direction"]): r["count"] for r in result.report.disconnects_by_family}
    assert fam == {("geth", "Useless peer", "received"): 20,
                   ("nethermind", "Breach of protocol", "received"): 20,
                   ("geth", "Too many peers", "received"): 10}


# -- 9: neighbors histogram -------------------------------------------------------------


@criterion(9, "neighbors_hist puts all mass at each family's scripted length")
def test_c9_neighbors_histogram():
    hist = scenario("appendix_c_timeouts").report.neighbors_hist
    got = {(r["family"], r["length"]): r["pct"] for r in hist}
    assert got == {("geth", 16): 100.0, ("besu", 13): 100.0, ("nethermind", 12): 100.0, ("bor", 6): 100.0}


# -- 10: determinism -----------------------------------------------------------------------


@criterion(10, "same seed, hash-identical event logs for every bundled scenario")
@pytest.mark.parametrize("name", BUNDLED)
def test_c10_determinism(name):
    first = scenario(name)
    second = run_scenario(load_scenario(name))
    assert first.event_lines() == second.event_lines()
    assert first.digest() == second.digest()


# -- 11: rate limiter -----------------------------------------------------------------------


def _max_in_window(times, window=60.0):
    times = sorted(times)
    best, j = 0, 0
    for i, t in enumerate(times):
        while t - times[j] >= window:
            j += 1
        best = max(best, i - j + 1)
    return best


arrivals = st.lists(st.tuples(st.integers(0, 4), st.floats(0, 600, allow_nan=False)), max_size=400)


@criterion(11, "no peer sees more than 10 dials in any 60 s window")
@settings(max_examples=300, deadline=None)
@given(arrivals)
def test_c11_limiter_window_property(pattern):
    lim = RateLimiter(10, 60.0)
    allowed = defaultdict(list)
    for peer, t in sorted(pattern, key=lambda x: x[1]):
        if lim.check(bytes([peer]), t) == ALLOW:
            allowed[peer].append(t)
    for times in allowed.values():
        assert _max_in_window(times) <= 10


@criterion(11, "no peer sees more than 10 dials in any 60 s window")
@settings(max_examples=40, deadline=None)
@given(n_peers=st.integers(1, 4), expiry=st.floats(0.5, 10.0), hold=st.floats(0.0, 3.0),
       budget=st.integers(1, 120))
def test_c11_scheduler_never_exceeds_limit(n_peers, expiry, hold, budget):
    """The dial scheduler, driven on virtual time, honors the limiter for every peer."""
    loop = VirtualTimeLoop()
    try:
        clock = loop.time
        dials = defaultdict(list)

        async def dial(node):
            dials[node.node_id].append(clock())
            await asyncio.sleep(hold)

        async def main():
            sched = DialScheduler(dial, clock, slots=8, history_expiry=expiry, budget=budget)
            for i in range(n_peers):
                key = crypto.generate_private_key(random.Random(i))
                sched.add(Node(NodeIdentity(crypto.private_to_public(key)), Endpoint("192.0.2.9", 1, 1)))
            await asyncio.wait_for(sched.run(), 3600)

        loop.run_until_complete(main())
    finally:
        loop.close()
    assert sum(len(v) for v in dials.values()) == budget
    for times in dials.values():
        assert _max_in_window(times) <= 10


# -- 12: stateful DHT -------------------------------------------------------------------------


@criterion(12, "1e5 random table ops keep invariants, closest equals brute force, < 120 s")
def test_c12_stateful_table():
    start = time.perf_counter()
    r = random.Random(12)
    pool = [NodeIdentity(r.randbytes(64)) for _ in range(5000)]
    self_key = crypto.keccak256(r.randbytes(64))
    table = RoutingTable(self_key)
    ops = 0
    checks = 0
    now = 0.0
    while ops < 100_000:
        now += r.random()
        op = r.random()
        ident = r.choice(pool)
        if op < 0.55:
            pong = r.choice([None, now - r.random() * 100])
            table.upsert(TableEntry(ident, Endpoint("198.51.100.4", 30303, 30303), pong, None, now))
        elif op < 0.7:
            table.remove(ident.node_id)
        elif op < 0.85:
            table.revalidation_succeeded(ident.node_id, now)
        else:
            if len(table):
                victim = table.pick_revalidation_target(r)
                table.revalidation_failed(victim.identity.node_id)
        ops += 1
        if ops % 250 == 0:
            table.check_invariants()
            target = crypto.keccak256(r.randbytes(64))
            k = r.randint(1, 20)
            got = [e.key for e in table.closest(target, k)]
            assert got == oracles.brute_force_closest([e.key for e in table], target, k)
            checks += 1
    assert checks == 400
    assert time.perf_counter() - start < 120.0
