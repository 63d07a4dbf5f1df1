"""Message collection, peer dossiers, classification and report tables."""
from __future__ import annotations

import ipaddress
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from .session import TAXONOMY, UNKNOWN_BUCKET, classify_disconnect

NEIGHBORS_LINK_WINDOW = 1.5
PONG_LINK_WINDOW = 20.0

# claimed addresses that can only be a local misconfiguration when the packet came from outside
_SUSPECT_NETS = [ipaddress.ip_network(n) for n in (
    "127.0.0.0/8", "0.0.0.0/32", "10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16",
    "::1/128", "::/128", "fc00::/7", "fe80::/10",
)]


def _suspect(ip: str) -> bool:
    try:
        addr = ipaddress.ip_address(ip)
    except ValueError:
        return False
    return any(addr in net for net in _SUSPECT_NETS if net.version == addr.version)


def detect_false_ip(claimed_ip: str, source_ip: str) -> bool:
    """Claimed fromIP is loopback/unspecified/private while the datagram came from a public source."""
    return _suspect(claimed_ip) and not _suspect(source_ip)


def client_family(client_id: Optional[str]) -> str:
    if not client_id:
        return "unknown"
    return client_id.split("/", 1)[0].lower() or "unknown"


def _keep(new, old):
    return old if new is None else new


def _split_addr(addr: str) -> Tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host.strip("[]"), int(port)


# -- collection -------------------------------------------------------------


class Collector:
    """Event sink: stamps ids and timestamps and links responses to requests.

    Many producers may call :meth:`emit`; a lock keeps ids monotonic and the
    downstream sinks see events in id order.
    """

    def __init__(self, clock: Callable[[], float], sinks: Iterable[Callable[[dict], None]] = ()) -> None:
        self.clock = clock
        self.sinks = list(sinks)
        self._next = 1
        self._lock = threading.Lock()
        self._ping_hashes: Dict[str, Tuple[int, float, str]] = {}
        self._enr_hashes: Dict[str, Tuple[int, str]] = {}
        self._findnode: Dict[Tuple[str, str], Tuple[int, float]] = {}
        self._status: Dict[Tuple[str, str], int] = {}

    def emit(self, event: dict) -> dict:
        with self._lock:
            ev = {"id": self._next, "ts": round(self.clock(), 6)}
            self._next += 1
            ev.update(event)
            if ev.get("type") == "message":
                ev.setdefault("linkedTo", None)
                self._link(ev)
            for sink in self.sinks:
                sink(ev)
            return ev

    def _link(self, ev: dict) -> None:
        kind, peer, ts, d = ev.get("kind"), ev.get("peer"), ev["ts"], ev.get("dir")
        body = ev.get("body") or {}
        if kind == "Ping" and ev.get("hash"):
            self._ping_hashes[ev["hash"]] = (ev["id"], ts, peer)
        elif kind == "Pong":
            hit = self._ping_hashes.get(body.get("pingHash", ""))
            if hit and hit[2] == peer and ts - hit[1] <= PONG_LINK_WINDOW:
                ev["linkedTo"] = hit[0]
        elif kind == "FindNode" and d == "out":
            self._findnode[(peer, "out")] = (ev["id"], ts)
        elif kind == "Neighbors" and d == "in":
            hit = self._findnode.get((peer, "out"))
            if hit and ts - hit[1] <= NEIGHBORS_LINK_WINDOW:
                ev["linkedTo"] = hit[0]
        elif kind == "ENRRequest" and ev.get("hash"):
            self._enr_hashes[ev["hash"]] = (ev["id"], peer)
        elif kind == "ENRResponse":
            hit = self._enr_hashes.get(body.get("requestHash", ""))
            if hit and hit[1] == peer:
                ev["linkedTo"] = hit[0]
        elif kind == "Status":
            other = self._status.get((peer, "in" if d == "out" else "out"))
            if other is not None:
                ev["linkedTo"] = other
            else:
                self._status[(peer, d)] = ev["id"]
            if other is not None:
                self._status.pop((peer, "in" if d == "out" else "out"), None)


# -- dossiers ---------------------------------------------------------------


@dataclass
class PeerRecord:
    id: str
    ip: Optional[str] = None
    udp: Optional[int] = None
    tcp: Optional[int] = None
    client_id: Optional[str] = None
    sub_protocols: List[str] = field(default_factory=list)
    network_id: Optional[int] = None
    genesis_hash: Optional[str] = None
    fork_id: Optional[str] = None
    chain_check: Optional[str] = None
    first_seen: Optional[float] = None
    last_seen: Optional[float] = None
    discovered_via: List[str] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    claimed_ip: Optional[str] = None

    def touch(self, ts: float) -> None:
        if self.first_seen is None or ts < self.first_seen:
            self.first_seen = ts
        if self.last_seen is None or ts > self.last_seen:
            self.last_seen = ts

    def via(self, how: str) -> None:
        if how not in self.discovered_via:
            self.discovered_via.append(how)

    def flag(self, name: str) -> None:
        if name not in self.flags:
            self.flags.append(name)

    @property
    def label(self) -> str:
        return classify_peer(self)

    def to_json(self) -> dict:
        return {
            "id": self.id, "ip": self.ip, "udp": self.udp, "tcp": self.tcp,
            "clientId": self.client_id, "sub-protocols": list(self.sub_protocols),
            "networkID": self.network_id, "genesisHash": self.genesis_hash, "forkID": self.fork_id,
            "firstSeen": self.first_seen, "lastSeen": self.last_seen, "class": self.label,
            "discoveredVia": list(self.discovered_via), "flags": list(self.flags),
            "claimedIp": self.claimed_ip, "chainCheck": self.chain_check,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PeerRecord":
        return cls(d["id"], d.get("ip"), d.get("udp"), d.get("tcp"), d.get("clientId"),
                   list(d.get("sub-protocols") or []), d.get("networkID"), d.get("genesisHash"),
                   d.get("forkID"), d.get("chainCheck"), d.get("firstSeen"), d.get("lastSeen"),
                   list(d.get("discoveredVia") or []), list(d.get("flags") or []), d.get("claimedIp"))


def classify_peer(rec: PeerRecord) -> str:
    """C: Status validated Compatible; B: sub-protocol exchange but not compatible; A: neither."""
    if rec.chain_check == "Compatible":
        return "C"
    if rec.client_id is not None or rec.sub_protocols or rec.network_id is not None:
        return "B"
    return "A"


@dataclass
class Exchange:
    peer: str
    ts: float
    lengths: List[int] = field(default_factory=list)


class Analyzer:
    """Consumes collected events in order and keeps every running statistic."""

    def __init__(self) -> None:
        self.records: Dict[str, PeerRecord] = {}
        self.message_counts: Counter = Counter()
        self.message_dirs: Counter = Counter()
        self.malformed: Counter = Counter()
        self.quarantined = 0
        self.disconnects: Counter = Counter()
        self.disconnect_events: List[dict] = []
        self.exchanges: Dict[int, Exchange] = {}
        self.findnode_results: Counter = Counter()
        self.findnode_elapsed: Dict[str, List[float]] = defaultdict(list)
        self.lookups: List[dict] = []
        self.dial_order: List[str] = []
        self.checkpoints: List[Tuple[int, int]] = []
        self.sessions_started = 0
        self.local: Optional[dict] = None
        self.pongs: List[dict] = []
        self.events = 0
        self.neighbor_lists: Dict[int, List[str]] = {}

    def record(self, peer: str) -> PeerRecord:
        rec = self.records.get(peer)
        if rec is None:
            rec = self.records[peer] = PeerRecord(peer)
        return rec

    def ingest(self, ev: dict) -> None:
        self.events += 1
        try:
            if ev.get("type") == "message":
                self._message(ev)
            elif ev.get("type") == "session":
                self._session(ev)
            else:
                self.quarantined += 1
        except (KeyError, TypeError, ValueError, AttributeError):
            self.quarantined += 1

    def _message(self, ev: dict) -> None:
        kind, peer, ts = ev["kind"], ev.get("peer"), ev["ts"]
        self.message_counts[kind] += 1
        self.message_dirs[(kind, ev["dir"])] += 1
        body = ev.get("body") or {}
        if peer is None:
            return
        rec = self.record(peer)
        rec.touch(ts)
        if ev["dir"] == "in" and ev.get("layer") == "discovery":
            ip, port = _split_addr(ev["addr"])
            if kind == "Ping":
                rec.ip, rec.udp = ip, port
                claimed = (body.get("from") or {})
                if claimed.get("tcp"):
                    rec.tcp = claimed["tcp"]
                rec.via("Ping")
                cip = claimed.get("ip")
                if cip is not None and detect_false_ip(cip, ip):
                    rec.flag("FalseIP")
                    rec.claimed_ip = cip
            elif kind == "Neighbors":
                for n in body.get("nodes", []):
                    other = self.record(n["id"])
                    other.touch(ts)
                    other.ip, other.udp, other.tcp = n["ip"], n["udp"], n["tcp"]
                    other.via("Neighbors")
                link = ev.get("linkedTo")
                if link is not None and link in self.exchanges:
                    self.exchanges[link].lengths.append(len(body.get("nodes", [])))
                    self.neighbor_lists.setdefault(link, []).extend(n["id"] for n in body.get("nodes", []))
            elif rec.ip is None:
                rec.ip, rec.udp = ip, port
        elif ev["dir"] == "out" and kind == "FindNode":
            self.exchanges[ev["id"]] = Exchange(peer, ts)
        elif ev["dir"] == "out" and kind == "Pong":
            self.pongs.append(ev)
        # learned facts only ever get filled in, never blanked by a sparser event
        if kind == "Hello" and ev["dir"] == "in":
            rec.client_id = body.get("clientId", rec.client_id)
            rec.sub_protocols = list(body.get("caps") or rec.sub_protocols)
            rec.via("Hello")
            if rec.ip is None and ev.get("addr"):
                rec.ip, rec.tcp = _split_addr(ev["addr"])
        elif kind == "Status" and ev["dir"] == "in":
            rec.network_id = _keep(body.get("networkID"), rec.network_id)
            rec.genesis_hash = _keep(body.get("genesisHash"), rec.genesis_hash)
            rec.fork_id = _keep(body.get("forkID"), rec.fork_id)

    def _session(self, ev: dict) -> None:
        kind = ev["kind"]
        peer = ev.get("peer")
        if kind == "DecodeError":
            self.malformed[ev.get("error", "unknown")] += 1
        elif kind == "Disconnect":
            bucket = ev.get("bucket") or classify_disconnect(ev)
            self.disconnects[(bucket, ev["dir"])] += 1
            self.disconnect_events.append(ev)
        elif kind == "StatusCheck" and peer:
            rec = self.record(peer)
            rec.chain_check = ev["result"]
            rec.network_id = _keep(ev.get("networkID"), rec.network_id)
            rec.genesis_hash = _keep(ev.get("genesisHash"), rec.genesis_hash)
            rec.fork_id = _keep(ev.get("forkID"), rec.fork_id)
        elif kind == "DialAttempt" and peer:
            self.dial_order.append(peer)
            rec = self.record(peer)
            rec.touch(ev["ts"])
            if rec.ip is None and ev.get("addr"):
                rec.ip, rec.tcp = _split_addr(ev["addr"])
        elif kind == "DialFailed" and peer:
            self.record(peer).flag("TcpUnreachable")
        elif kind == "Checkpoint":
            self.checkpoints.append((ev["attempts"], len(self.dial_order)))
        elif kind == "FindNodeResult":
            self.findnode_results[ev["outcome"]] += 1
            self.findnode_elapsed[ev["label"]].append(ev["elapsed"])
        elif kind == "LookupResult":
            self.lookups.append(ev)
        elif kind == "ObserverStart":
            self.local = ev

    # -- reports --------------------------------------------------------

    def family_of(self, peer: str) -> str:
        rec = self.records.get(peer)
        return client_family(rec.client_id if rec else None)

    def build_report(self) -> "Report":
        return Report.build(self)


def _pct(part: float, whole: float) -> float:
    return round(100.0 * part / whole, 2) if whole else 0.0


@dataclass
class Report:
    messages: List[dict]
    classes: List[dict]
    disconnects: List[dict]
    neighbors_hist: List[dict]
    chains: List[dict]
    dial_efficiency: List[dict]
    disconnects_by_family: List[dict]
    neighbors_mix: List[dict]
    findnode: List[dict]
    false_ip: dict
    summary: dict

    TABLES = ("messages", "classes", "disconnects", "neighbors_hist", "chains", "dial_efficiency",
              "disconnects_by_family", "neighbors_mix", "findnode")
    COLUMNS = {
        "messages": ("type", "count"),
        "classes": ("class", "count", "pct"),
        "disconnects": ("reason", "received", "sent", "pct"),
        "neighbors_hist": ("family", "length", "pct"),
        "chains": ("networkId", "genesis", "forkId", "count", "pct"),
        "dial_efficiency": ("attempts", "unique", "dupAvg", "pctA", "pctB", "pctC"),
        "disconnects_by_family": ("family", "reason", "direction", "count"),
        "neighbors_mix": ("family", "listedFamily", "count", "pct"),
        "findnode": ("outcome", "count", "elapsedMin", "elapsedMax"),
    }

    @classmethod
    def build(cls, a: Analyzer) -> "Report":
        messages = [{"type": k, "count": a.message_counts[k]} for k in sorted(a.message_counts)]

        labels = Counter(classify_peer(r) for r in a.records.values())
        total = sum(labels.values())
        classes = [{"class": c, "count": labels[c], "pct": _pct(labels[c], total)} for c in "ABC"]

        n_disc = sum(a.disconnects.values())
        disconnects = []
        for bucket in TAXONOMY + (UNKNOWN_BUCKET,):
            rcv, snt = a.disconnects[(bucket, "received")], a.disconnects[(bucket, "sent")]
            if bucket == UNKNOWN_BUCKET and not rcv + snt:
                continue
            disconnects.append({"reason": bucket, "received": rcv, "sent": snt,
                                "pct": _pct(rcv + snt, n_disc)})

        by_family: Dict[str, Counter] = defaultdict(Counter)
        for ex in a.exchanges.values():
            if ex.lengths:
                by_family[a.family_of(ex.peer)][sum(ex.lengths)] += 1
        neighbors_hist = []
        for fam in sorted(by_family):
            hist = by_family[fam]
            n = sum(hist.values())
            for length in sorted(hist):
                neighbors_hist.append({"family": fam, "length": length, "pct": _pct(hist[length], n),
                                       "count": hist[length]})

        mix: Dict[str, Counter] = defaultdict(Counter)
        for ex_id, ids in a.neighbor_lists.items():
            fam = a.family_of(a.exchanges[ex_id].peer)
            for nid in ids:
                mix[fam][a.family_of(nid)] += 1
        neighbors_mix = []
        for fam in sorted(mix):
            n = sum(mix[fam].values())
            for other in sorted(mix[fam]):
                neighbors_mix.append({"family": fam, "listedFamily": other, "count": mix[fam][other],
                                      "pct": _pct(mix[fam][other], n)})

        chain_counts = Counter((r.network_id, r.genesis_hash, r.fork_id) for r in a.records.values()
                               if r.network_id is not None)
        n_chain = sum(chain_counts.values())
        chains = [{"networkId": k[0], "genesis": k[1], "forkId": k[2], "count": v, "pct": _pct(v, n_chain)}
                  for k, v in sorted(chain_counts.items(), key=lambda kv: (-kv[1], str(kv[0])))]

        dial_efficiency = []
        for attempts, upto in a.checkpoints:
            peers = list(dict.fromkeys(a.dial_order[:upto]))
            lab = Counter(classify_peer(a.records[p]) for p in peers)
            u = len(peers)
            dial_efficiency.append({
                "attempts": attempts, "unique": u, "dupAvg": round(attempts / u, 2) if u else 0.0,
                "pctA": _pct(lab["A"], u), "pctB": _pct(lab["B"], u), "pctC": _pct(lab["C"], u)})

        fam_disc = Counter()
        for ev in a.disconnect_events:
            fam_disc[(a.family_of(ev.get("peer") or ""), ev.get("bucket") or classify_disconnect(ev),
                      ev["dir"])] += 1
        disconnects_by_family = [{"family": k[0], "reason": k[1], "direction": k[2], "count": v}
                                 for k, v in sorted(fam_disc.items())]

        findnode = []
        for label in sorted(a.findnode_elapsed):
            el = a.findnode_elapsed[label]
            findnode.append({"outcome": label, "count": len(el),
                             "elapsedMin": round(min(el), 6), "elapsedMax": round(max(el), 6)})

        flagged = sorted(r.id for r in a.records.values() if "FalseIP" in r.flags)
        claimed = Counter(a.records[p].claimed_ip for p in flagged)
        pings_from = sum(1 for r in a.records.values() if "Ping" in r.discovered_via)
        false_ip = {"flagged": len(flagged), "pingingPeers": pings_from,
                    "pct": _pct(len(flagged), pings_from),
                    "claimedIps": {k: claimed[k] for k in sorted(claimed)}, "peers": flagged}

        summary = {"events": a.events, "peers": total, "disconnects": n_disc,
                   "quarantined": a.quarantined, "malformed": dict(sorted(a.malformed.items())),
                   "dialAttempts": len(a.dial_order),
                   "lookups": [{"elapsed": round(l.get("elapsed", 0.0), 6), "asked": l["asked"],
                                "failed": l["failed"]} for l in a.lookups]}
        return cls(messages, classes, disconnects, neighbors_hist, chains, dial_efficiency,
                   disconnects_by_family, neighbors_mix, findnode, false_ip, summary)

    def table(self, name: str) -> List[dict]:
        return getattr(self, name)

    def to_json(self) -> dict:
        out = {name: self.table(name) for name in self.TABLES}
        out["false_ip"] = self.false_ip
        out["summary"] = self.summary
        return out


def analyze_events(events: Iterable[dict]) -> Analyzer:
    a = Analyzer()
    for ev in events:
        a.ingest(ev)
    return a
