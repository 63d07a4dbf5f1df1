import pytest

import oracles
from devp2p_observatory.analyzer import (Analyzer, Collector, PeerRecord, Report, analyze_events, classify_peer,
                                         client_family, detect_false_ip)


class Clock:
    def __init__(self):
        self.t = 1000.0

    def __call__(self):
        return self.t


def collect():
    clock = Clock()
    out = []
    return clock, Collector(clock, [out.append]), out


def msg(kind, d, peer="aa", **kw):
    return {"type": "message", "layer": "discovery", "kind": kind, "dir": d, "peer": peer,
            "addr": "203.0.113.5:30303", "size": 100, **kw}


@pytest.mark.parametrize("claimed,source,flag", [
    ("127.0.0.1", "203.0.113.5", True),
    ("0.0.0.0", "203.0.113.5", True),
    ("10.1.2.3", "203.0.113.5", True),
    ("192.168.1.1", "203.0.113.5", True),
    ("172.20.0.1", "203.0.113.5", True),
    ("::1", "2001:db8::1", True),
    ("203.0.113.5", "203.0.113.5", False),
    ("198.51.100.4", "203.0.113.5", False),
    ("127.0.0.1", "127.0.0.1", False),
])
def test_false_ip_rule(claimed, source, flag):
    assert detect_false_ip(claimed, source) is flag
    if claimed != source and ":" not in claimed:
        assert oracles.is_suspect_ip(claimed) is flag


def test_ids_and_pong_link():
    clock, col, out = collect()
    col.emit(msg("Ping", "out", hash="h1"))
    clock.t += 0.05
    col.emit(msg("Pong", "in", body={"pingHash": "h1"}))
    col.emit(msg("Pong", "in", peer="bb", body={"pingHash": "h1"}))  # wrong peer
    assert [e["id"] for e in out] == [1, 2, 3]
    assert out[1]["linkedTo"] == 1 and out[2]["linkedTo"] is None
    assert out[1]["ts"] == 1000.05


def test_neighbors_link_window():
    clock, col, out = collect()
    col.emit(msg("FindNode", "out"))
    clock.t += 1.0
    col.emit(msg("Neighbors", "in", body={"nodes": []}))
    clock.t += 1.0
    col.emit(msg("Neighbors", "in", body={"nodes": []}))
    assert out[1]["linkedTo"] == 1 and out[2]["linkedTo"] is None


def test_status_pairs_link_both_ways():
    clock, col, out = collect()
    col.emit(msg("Status", "out", layer="eth"))
    col.emit(msg("Status", "in", layer="eth"))
    assert out[1]["linkedTo"] == 1


def test_classes():
    assert classify_peer(PeerRecord("a")) == "A"
    assert classify_peer(PeerRecord("a", client_id="Geth/v1")) == "B"
    assert classify_peer(PeerRecord("a", client_id="Geth/v1", chain_check="Compatible")) == "C"
    assert classify_peer(PeerRecord("a", network_id=56, chain_check="DifferentChain")) == "B"
    assert client_family("Nethermind/v1.25") == "nethermind"
    assert client_family(None) == "unknown"


def test_record_json_round_trip():
    rec = PeerRecord("ab", "203.0.113.5", 1, 2, "Geth/x", ["eth/68"], 1, "d4e5", "9f3d2254/0", "Compatible",
                     1.0, 2.0, ["Ping"], ["FalseIP"], "127.0.0.1")
    j = rec.to_json()
    assert j["class"] == "C" and j["sub-protocols"] == ["eth/68"]
    assert PeerRecord.from_json(j) == rec


def test_malformed_events_quarantined():
    a = analyze_events([{"type": "weird"}, {"type": "message"}, {"type": "session", "kind": "Disconnect"},
                        {"id": 1, "ts": 1.0, "type": "session", "kind": "Checkpoint", "attempts": 1}])
    assert a.quarantined == 3 and a.events == 4


def test_hello_and_status_never_blank_known_fields():
    a = Analyzer()
    base = {"ts": 1.0, "layer": "rlpx", "peer": "aa", "addr": "203.0.113.5:30303", "type": "message",
            "dir": "in"}
    a.ingest(dict(base, id=1, kind="Status", body={"networkID": 1, "genesisHash": "d4", "forkID": "9f3d2254/0"}))
    a.ingest(dict(base, id=2, kind="Status", body={}))
    a.ingest({"id": 3, "ts": 2.0, "type": "session", "kind": "StatusCheck", "peer": "aa", "result": "Compatible"})
    rec = a.records["aa"]
    assert (rec.network_id, rec.fork_id, rec.chain_check) == (1, "9f3d2254/0", "Compatible")


def test_report_tables():
    clock, col, events = collect()
    col.emit({"type": "session", "kind": "DialAttempt", "peer": "p1", "addr": "203.0.113.1:30303"})
    col.emit({"type": "session", "kind": "DialAttempt", "peer": "p2", "addr": "203.0.113.2:30303"})
    col.emit({"type": "session", "kind": "Checkpoint", "attempts": 2})
    col.emit({"type": "session", "kind": "DialAttempt", "peer": "p1", "addr": "203.0.113.1:30303"})
    col.emit({"type": "session", "kind": "Checkpoint", "attempts": 3})
    col.emit(msg("Hello", "in", peer="p1", layer="rlpx", body={"clientId": "Geth/v1", "caps": ["eth/68"]}))
    col.emit({"type": "session", "kind": "StatusCheck", "peer": "p1", "result": "Compatible",
              "networkID": 1, "genesisHash": "d4", "forkID": "9f3d2254/0"})
    col.emit({"type": "session", "kind": "Disconnect", "dir": "received", "reason": 3, "peer": "p1",
              "bucket": "Useless peer"})
    col.emit({"type": "session", "kind": "Disconnect", "dir": "sent", "reason": 0x42, "peer": "p2"})
    col.emit(msg("FindNode", "out", peer="p1"))
    col.emit(msg("Neighbors", "in", peer="p1", body={"nodes": [
        {"id": f"n{i}", "ip": "198.51.100.1", "udp": 1, "tcp": 1} for i in range(12)]}))
    col.emit(msg("Neighbors", "in", peer="p1", body={"nodes": [
        {"id": f"m{i}", "ip": "198.51.100.1", "udp": 1, "tcp": 1} for i in range(4)]}))
    col.emit({"type": "session", "kind": "FindNodeResult", "peer": "p1", "outcome": "Complete16",
              "label": "Complete16", "elapsed": 0.02, "nodes": 16, "datagrams": [12, 4]})
    rep = analyze_events(events).build_report()
    assert rep.dial_efficiency == [
        {"attempts": 2, "unique": 2, "dupAvg": 1.0, "pctA": 50.0, "pctB": 0.0, "pctC": 50.0},
        {"attempts": 3, "unique": 2, "dupAvg": 1.5, "pctA": 50.0, "pctB": 0.0, "pctC": 50.0}]
    disc = {r["reason"]: (r["received"], r["sent"]) for r in rep.disconnects}
    assert disc["Useless peer"] == (1, 0) and disc["unknown"] == (0, 1) and len(disc) == 10
    assert rep.neighbors_hist == [{"family": "geth", "length": 16, "pct": 100.0, "count": 1}]
    assert rep.findnode == [{"outcome": "Complete16", "count": 1, "elapsedMin": 0.02, "elapsedMax": 0.02}]
    assert rep.chains[0]["forkId"] == "9f3d2254/0"
    assert {r["class"]: r["count"] for r in rep.classes} == {"A": 17, "B": 0, "C": 1}
    assert set(rep.to_json()) == set(Report.TABLES) | {"false_ip", "summary"}
