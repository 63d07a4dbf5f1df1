"""The measurement node: discovery, dial scheduling and sessions wired together.

Flow per discovered peer: the discovery endpoint learns it (inbound Ping or
a Neighbors reply), the dial scheduler queues it, and when a slot is free
the peer is dialed, the secure channel and Hello/Status handshakes run, and
the outcome is reported through the shared event sink.
"""
from __future__ import annotations

import asyncio
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Set, Tuple

from .codec import Endpoint
from .discovery import DENY, DiscoveryConfig, DiscoveryNode, Node, RateLimiter
from .rlpx import CHANNELS
from .session import SessionConfig, SessionOutcome, open_session

log = logging.getLogger(__name__)


@dataclass
class ObserverConfig:
    session: SessionConfig
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    max_peer_slots: int = 50
    dial_history_expiry: float = 35.0
    dial_budget: Optional[int] = None
    checkpoints: Tuple[int, ...] = ()
    dial: bool = True
    channel: str = "loopback"
    connect_timeout: float = 5.0
    drain_deadline: float = 5.0


class DialScheduler:
    """Fresh peers first, then redials once a peer's history entry expires.

    Attempts are counted when issued; the per-peer rate limiter is consulted
    for every attempt and denied peers are pushed back, never dialed.
    """

    def __init__(self, dial: Callable, clock: Callable[[], float], *, slots: int = 50,
                 history_expiry: float = 35.0, limiter: Optional[RateLimiter] = None,
                 budget: Optional[int] = None, checkpoints=(), emit=None) -> None:
        self._dial = dial
        self.clock = clock
        self.slots = slots
        self.history_expiry = history_expiry
        self.limiter = limiter or RateLimiter(10, 60.0)
        self.budget = budget
        self.checkpoints = tuple(sorted(checkpoints))
        self.emit = emit or (lambda ev: None)
        self.known: Dict[bytes, Node] = {}
        self._fresh: Deque[bytes] = deque()
        self._redial: Deque[Tuple[float, bytes]] = deque()
        self._parked: Set[bytes] = set()
        self.connected: Set[bytes] = set()
        self.attempts = 0
        self.dial_log: List[Tuple[float, bytes]] = []
        self._wake = asyncio.Event()
        self._tasks: Dict[asyncio.Task, None] = {}  # ordered, so cancellation order is stable
        self.done = asyncio.Event()

    def add(self, node: Node) -> None:
        nid = node.node_id
        if nid in self.known:
            self.known[nid] = node  # fresher endpoint
            return
        self.known[nid] = node
        self._fresh.append(nid)
        self._wake.set()

    def _pick(self) -> Optional[Node]:
        now = self.clock()
        if self._fresh:
            nid = self._fresh.popleft()
            self.limiter.check(nid, now)  # a first attempt is always within budget
            return self.known[nid]
        while self._redial and self._redial[0][0] <= now:
            _, nid = self._redial.popleft()
            if nid in self.connected:
                self._parked.add(nid)
                continue
            if self.limiter.check(nid, now) == DENY:
                self._redial.append((now + 1.0, nid))
                continue
            return self.known[nid]
        return None

    def _next_due(self) -> Optional[float]:
        return self._redial[0][0] - self.clock() if self._redial else None

    async def run(self) -> None:
        slots = asyncio.Semaphore(self.slots)
        try:
            while self.budget is None or self.attempts < self.budget:
                await slots.acquire()
                node = self._pick()
                while node is None:
                    self._wake.clear()
                    wait = self._next_due()
                    try:
                        await asyncio.wait_for(self._wake.wait(), None if wait is None else max(wait, 0.001))
                    except asyncio.TimeoutError:
                        pass
                    node = self._pick()
                self._attempt(node, slots)
            if self._tasks:
                await asyncio.gather(*list(self._tasks), return_exceptions=True)
        finally:
            self.done.set()

    def _attempt(self, node: Node, slots: asyncio.Semaphore) -> None:
        now = self.clock()
        nid = node.node_id
        self.attempts += 1
        self.dial_log.append((now, nid))
        self.connected.add(nid)
        self._redial.append((now + self.history_expiry, nid))
        self.emit({"type": "session", "kind": "DialAttempt", "peer": nid.hex(),
                   "addr": f"{node.endpoint.ip}:{node.endpoint.tcp_port}", "attempt": self.attempts})
        if self.attempts in self.checkpoints:
            self.emit({"type": "session", "kind": "Checkpoint", "attempts": self.attempts})
        task = asyncio.ensure_future(self._run_dial(node, slots))
        self._tasks[task] = None
        task.add_done_callback(lambda t: self._tasks.pop(t, None))

    async def _run_dial(self, node: Node, slots: asyncio.Semaphore) -> None:
        nid = node.node_id
        try:
            await self._dial(node)
        except asyncio.CancelledError:
            raise
        except Exception:  # one bad peer must not stop the scheduler
            log.exception("dial to %s failed unexpectedly", nid.hex()[:16])
        finally:
            self.connected.discard(nid)
            if nid in self._parked:
                self._parked.discard(nid)
                self._redial.append((self.clock(), nid))
            slots.release()
            self._wake.set()

    async def cancel(self) -> None:
        for t in list(self._tasks):
            t.cancel()
        if self._tasks:
            await asyncio.gather(*list(self._tasks), return_exceptions=True)


class Observer:
    """Measurement node. ``connect(ip, port)`` opens a TCP stream pair."""

    def __init__(self, private_key: bytes, endpoint: Endpoint, *, udp, connect,
                 clock: Callable[[], float], config: ObserverConfig,
                 emit: Optional[Callable[[dict], None]] = None,
                 rng: Optional[random.Random] = None) -> None:
        self.key = private_key
        self.config = config
        self.clock = clock
        self.emit = emit or (lambda ev: None)
        self.rng = rng or random.Random(0)
        self.connect = connect
        self.discovery = DiscoveryNode(private_key, endpoint, udp, clock=clock, config=config.discovery,
                                       rng=self.rng, emit=self.emit)
        self.outcomes: List[Tuple[bytes, SessionOutcome]] = []
        self.scheduler = DialScheduler(
            self._dial, clock, slots=config.max_peer_slots,
            history_expiry=config.dial_history_expiry,
            limiter=RateLimiter(config.discovery.rate_per_peer_per_minute, 60.0),
            budget=config.dial_budget, checkpoints=config.checkpoints, emit=self.emit)
        self.discovery.on_seen.append(self._seen)
        self._dial_task: Optional[asyncio.Task] = None

    @property
    def identity(self):
        return self.discovery.identity

    def _seen(self, node: Node, via: str) -> None:
        if self.config.dial and node.node_id != self.identity.node_id:
            self.scheduler.add(node)

    async def _dial(self, node: Node) -> SessionOutcome:
        outcome = await open_session(
            self.connect, CHANNELS[self.config.channel], self.key, node.node_id,
            node.endpoint.ip, node.endpoint.tcp_port, self.config.session,
            emit=self.emit, clock=self.clock, rng=self.rng,
            connect_timeout=self.config.connect_timeout)
        self.outcomes.append((node.node_id, outcome))
        return outcome

    def start(self, lookups: bool = False) -> None:
        self.emit({"type": "session", "kind": "ObserverStart", "peer": self.identity.hex,
                   "chain": self.config.session.chain.name,
                   **self.config.session.chain.chain_status(self.config.session.head).to_json()})
        if lookups:
            self.discovery.start()
        if self.config.dial:
            self._dial_task = asyncio.ensure_future(self.scheduler.run())

    async def stop(self) -> None:
        """Stop discovery and dialing; sessions still open get Client quitting."""
        await self.discovery.stop()
        if self._dial_task is not None:
            self._dial_task.cancel()
            await asyncio.gather(self._dial_task, return_exceptions=True)
        try:
            await asyncio.wait_for(self.scheduler.cancel(), self.config.drain_deadline)
        except asyncio.TimeoutError:
            log.warning("sessions did not drain within %.1fs", self.config.drain_deadline)
        self.emit({"type": "session", "kind": "ObserverStop", "attempts": self.scheduler.attempts})
