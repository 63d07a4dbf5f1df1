"""Declarative scenarios: parse, run under virtual time, check expected rows.

Scenario files are TOML, schema version 1::

    version = 1
    name = "false_ip"
    seed = 7
    duration = 120.0            # virtual seconds, upper bound

    [observer]
    chain = "mainnet"           # any name known to forkid.chain_by_name
    bootnodes = 0               # first N population peers seed the observer table
    lookups = 0                 # random-target lookups after start
    probe_all = false           # one FindNode to every peer, alpha at a time
    probe_at = 1.0
    dial = true
    announce = true             # peers ping the observer at their join time
    seed_tables = true
    disconnect_incompatible = true
    max_peer_slots = 50         # free parameter; 50 unless a scenario says otherwise
    dial_history_expiry = 35.0

    [schedule]
    dial_budget = 1000          # stop once this many dials were issued
    checkpoints = [1000]

    [[population]]
    profile = "geth"
    count = 90
    join_at = 0.0
    join_spread = 0.0           # joins spread evenly over this many seconds
    overrides = { tcp_reachable = false }

    [[assertions]]
    table = "classes"
    where = { class = "C" }
    column = "pct"
    expect = 13.07
    tolerance = 2.0             # absolute
    # or: check = "non-increasing" over a column, ignoring where/expect
"""
from __future__ import annotations

import asyncio
import hashlib
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import tomli

from .. import crypto
from ..analyzer import Analyzer, Collector, Report
from ..clock import SIM_EPOCH, VirtualTimeLoop, loop_clock
from ..codec import Endpoint
from ..discovery import DiscoveryConfig, Node, RateLimited
from ..forkid import MAINNET_HEAD, Head, chain_by_name
from ..observer import Observer, ObserverConfig
from ..session import SessionConfig
from ..store import encode_event
from .fabric import Fabric
from .population import OBSERVER_IP, Population, oracle_closest
from .profiles import MAINNET_CAPS, profile_by_name

SCHEMA_VERSION = 1
OBSERVER_CLIENT_ID = "devp2p-observatory/v0.1.0"
BUNDLED = ("appendix_c_timeouts", "table7_dial_efficiency", "false_ip", "disconnect_divergence",
           "bor_partition")


class ScenarioError(ValueError):
    """The scenario file is malformed."""


class AssertionFailure(AssertionError):
    def __init__(self, cell: str, expected, actual, tolerance: float = 0.0) -> None:
        self.cell, self.expected, self.actual, self.tolerance = cell, expected, actual, tolerance
        tol = f" ± {tolerance}" if tolerance else ""
        super().__init__(f"{cell}: expected {expected}{tol}, got {actual}")


@dataclass
class PopulationEntry:
    profile: str
    count: int
    join_at: float = 0.0
    join_spread: float = 0.0
    overrides: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ObserverSpec:
    chain: str = "mainnet"
    bootnodes: int = 0
    lookups: int = 0
    probe_all: bool = False
    probe_at: float = 1.0
    dial: bool = True
    announce: bool = True
    seed_tables: bool = True
    disconnect_incompatible: bool = True
    max_peer_slots: int = 50
    dial_history_expiry: float = 35.0


@dataclass
class Schedule:
    dial_budget: Optional[int] = None
    checkpoints: List[int] = field(default_factory=list)


@dataclass
class Expectation:
    table: str
    column: str
    where: Dict[str, Any] = field(default_factory=dict)
    expect: Any = None
    tolerance: float = 0.0
    check: Optional[str] = None


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    duration: float
    population: List[PopulationEntry]
    observer: ObserverSpec = field(default_factory=ObserverSpec)
    schedule: Schedule = field(default_factory=Schedule)
    assertions: List[Expectation] = field(default_factory=list)
    version: int = SCHEMA_VERSION


def _build(cls, data: dict, where: str):
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ScenarioError(f"{where}: unknown key {unknown[0]!r}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def parse_scenario(data: dict) -> ScenarioConfig:
    data = dict(data)
    version = data.pop("version", None)
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported scenario version {version!r}; expected {SCHEMA_VERSION}")
    pops = [_build(PopulationEntry, p, f"population[{i}]") for i, p in enumerate(data.pop("population", []))]
    if not pops:
        raise ScenarioError("scenario needs at least one population entry")
    for p in pops:
        profile_by_name(p.profile).with_overrides(**p.overrides)  # validates early
        if p.count < 0:
            raise ScenarioError(f"population count for {p.profile} is negative")
    obs = _build(ObserverSpec, data.pop("observer", {}), "observer")
    chain_by_name(obs.chain)
    sched = _build(Schedule, data.pop("schedule", {}), "schedule")
    checks = [_build(Expectation, a, f"assertions[{i}]") for i, a in enumerate(data.pop("assertions", []))]
    for key in ("name", "seed", "duration"):
        if key not in data:
            raise ScenarioError(f"missing top-level key {key!r}")
    cfg = _build(ScenarioConfig, dict(data, population=pops, observer=obs, schedule=sched,
                                      assertions=checks), "scenario")
    if cfg.duration <= 0:
        raise ScenarioError("duration must be positive")
    return cfg


def load_scenario(source: Union[str, Path]) -> ScenarioConfig:
    """Load a scenario file, or a bundled scenario by name."""
    path = Path(source)
    if not path.exists() and str(source) in BUNDLED:
        text = resources.files(__package__).joinpath("scenarios", f"{source}.toml").read_text()
    else:
        text = path.read_text()
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    return parse_scenario(data)


# -- running ----------------------------------------------------------------


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    events: List[dict]
    analyzer: Analyzer
    report: Report
    population: Population
    observer: Observer
    lookups: List[dict] = field(default_factory=list)

    def event_lines(self) -> List[str]:
        return [encode_event(ev) for ev in self.events]

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.event_lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()


def run_scenario(cfg: ScenarioConfig, check: bool = True) -> ScenarioResult:
    loop = VirtualTimeLoop()
    try:
        result = loop.run_until_complete(_run(cfg))
    finally:
        loop.close()
    if check:
        check_assertions(cfg.assertions, result.report)
    return result


async def _run(cfg: ScenarioConfig) -> ScenarioResult:
    loop = asyncio.get_running_loop()
    clock = loop_clock(loop, SIM_EPOCH)
    rng = random.Random(cfg.seed)
    fabric = Fabric(loop, random.Random(rng.getrandbits(64)))
    spec = cfg.observer
    chain = chain_by_name(spec.chain)
    head = MAINNET_HEAD if chain.network_id == 1 else Head(0, max(chain.genesis_time, MAINNET_HEAD.time))
    disc_cfg = DiscoveryConfig()
    pop = Population(fabric, clock, random.Random(rng.getrandbits(64)), head, disc_cfg)
    for entry in cfg.population:
        profile = profile_by_name(entry.profile).with_overrides(**entry.overrides)
        for peer in pop.add_many(profile, entry.count, entry.join_at, entry.join_spread):
            fabric.set_latency(peer.endpoint.ip, profile.latency_ms)
    for peer in pop.peers:
        pop.bring_up(peer)
    if spec.seed_tables:
        pop.seed_tables()

    analyzer = Analyzer()
    events: List[dict] = []
    collector = Collector(clock, [events.append, analyzer.ingest])
    session_cfg = SessionConfig(OBSERVER_CLIENT_ID, MAINNET_CAPS, chain, head,
                                disconnect_incompatible=spec.disconnect_incompatible)
    obs_cfg = ObserverConfig(session_cfg, disc_cfg, max_peer_slots=spec.max_peer_slots,
                             dial_history_expiry=spec.dial_history_expiry,
                             dial_budget=cfg.schedule.dial_budget,
                             checkpoints=tuple(cfg.schedule.checkpoints), dial=spec.dial)
    endpoint = Endpoint(OBSERVER_IP, 30303, 30303)
    obs_rng = random.Random(rng.getrandbits(64))
    observer = Observer(crypto.generate_private_key(obs_rng), endpoint, udp=None,
                        connect=fabric.connector(OBSERVER_IP), clock=clock, config=obs_cfg,
                        emit=collector.emit, rng=obs_rng)
    observer.discovery.transport = fabric.bind_udp(endpoint.udp_addr, observer.discovery.datagram_received)
    seeds = [p.node_id for p in pop.peers[:spec.bootnodes]]
    for p in pop.peers[:spec.bootnodes]:
        observer.discovery.add_bootnode(p.node)
    observer.start()
    me = Node(observer.identity, endpoint)
    if spec.announce:
        pop.schedule_announcements(me)

    lookups: List[dict] = []
    work: List[asyncio.Task] = []
    if spec.probe_all:
        work.append(asyncio.ensure_future(_probe_all(observer, pop, spec.probe_at, obs_rng)))
    if spec.lookups:
        work.append(asyncio.ensure_future(_lookups(observer, pop, seeds, spec.lookups, obs_rng, lookups)))
    waiters = list(work)
    if spec.dial and cfg.schedule.dial_budget is not None:
        waiters.append(asyncio.ensure_future(observer.scheduler.done.wait()))
    if waiters:
        await asyncio.wait(waiters, timeout=cfg.duration)
    else:
        await asyncio.sleep(cfg.duration)
    for t in waiters:
        t.cancel()
    await asyncio.gather(*waiters, return_exceptions=True)
    await observer.stop()
    await pop.stop()
    # let peers see the final disconnects, then drop anything still open
    await asyncio.sleep(1.0)
    await fabric.shutdown()
    return ScenarioResult(cfg, events, analyzer, analyzer.build_report(), pop, observer, lookups)


async def _probe_all(observer: Observer, pop: Population, at: float, rng: random.Random) -> None:
    """One FindNode per peer with a fresh random target, ``alpha`` in flight."""
    await asyncio.sleep(at)
    slots = asyncio.Semaphore(observer.config.discovery.alpha)
    disc = observer.discovery

    async def probe(peer, target):
        async with slots:
            try:
                await disc.find_node_and_wait(peer.node, target)
            except RateLimited:
                pass

    targets = [rng.randbytes(64) for _ in pop.peers]
    await asyncio.gather(*(probe(p, t) for p, t in zip(pop.peers, targets) if p.profile.udp_responsive))


async def _lookups(observer: Observer, pop: Population, seeds: Sequence[bytes], n: int,
                   rng: random.Random, out: List[dict]) -> None:
    for _ in range(n):
        target = rng.randbytes(64)
        # the lookup starts from whatever the observer's table holds right now
        start = list(seeds) + [e.identity.node_id for e in observer.discovery.table]
        found = await observer.discovery.lookup(target)
        out.append({"target": target.hex(), "result": [x.node_id.hex() for x in found],
                    "oracle": [x.hex() for x in oracle_closest(pop, start, target)]})


# -- assertions -------------------------------------------------------------


def _matches(row: dict, where: dict) -> bool:
    return all(str(row.get(k)) == str(v) for k, v in where.items())


def _cell(table: str, where: dict, column: str) -> str:
    cond = ",".join(f"{k}={v}" for k, v in where.items())
    return f"{table}[{cond}].{column}" if cond else f"{table}.{column}"


def check_assertions(expectations: Sequence[Expectation], report: Report) -> None:
    """Raise :class:`AssertionFailure` naming the first divergent report cell."""
    for exp in expectations:
        if exp.table not in Report.TABLES:
            raise ScenarioError(f"unknown report table {exp.table!r}")
        rows = [r for r in report.table(exp.table) if _matches(r, exp.where)]
        if exp.check is not None:
            if exp.check != "non-increasing":
                raise ScenarioError(f"unknown check {exp.check!r}")
            values = [r[exp.column] for r in rows]
            for i in range(1, len(values)):
                if values[i] > values[i - 1] + exp.tolerance:
                    raise AssertionFailure(f"{exp.table}[{i}].{exp.column}",
                                           f"<= {values[i - 1]}", values[i], exp.tolerance)
            continue
        cell = _cell(exp.table, exp.where, exp.column)
        if not rows:
            if exp.expect in (0, 0.0):
                continue
            raise AssertionFailure(cell, exp.expect, "missing row")
        actual = rows[0].get(exp.column)
        if isinstance(exp.expect, (int, float)) and isinstance(actual, (int, float)):
            if abs(actual - exp.expect) > exp.tolerance:
                raise AssertionFailure(cell, exp.expect, actual, exp.tolerance)
        elif actual != exp.expect:
            raise AssertionFailure(cell, exp.expect, actual)


__all__ = ["ScenarioConfig", "ScenarioResult", "ScenarioError", "AssertionFailure", "load_scenario",
           "parse_scenario", "run_scenario", "check_assertions", "BUNDLED", "encode_event"]
