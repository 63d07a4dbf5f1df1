"""RLPx session lifecycle: Hello negotiation, Status exchange, disconnects.

A :class:`Session` owns one secure channel and runs to completion, returning
a :class:`SessionOutcome`. Every session emits exactly one terminal
``Disconnect`` session event, labelled ``sent`` when this side wrote (or
chose) the reason and ``received`` otherwise; transport failures and
timeouts count as a received TCP sub-system error.
"""
from __future__ import annotations

import asyncio
import enum
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from . import codec, rlp
from .codec import (BREACH_OF_PROTOCOL, CLIENT_QUITTING, DISCONNECT, HELLO, P2P_PING, P2P_PONG,
                    REQUESTED, TCP_ERROR, TOO_MANY_PEERS, USELESS_PEER, Disconnect, Hello, Status)
from .crypto import private_to_public
from .forkid import ChainConfig, ChainStatus, ForkCheck, Head, validate_fork_id
from .rlpx import FrameMacError, SecureChannel, SessionError, TransportClosed

Caps = Tuple[Tuple[str, int], ...]
EventFn = Callable[[dict], None]

# message-space sizes of the sub-protocols we know
CAPABILITY_LENGTHS = {"eth": 17, "snap": 8}

TAXONOMY = (
    "Disconnect requested", "TCP sub-system error", "Breach of protocol", "Useless peer",
    "Too many peers", "Already connected", "Client quitting", "Ping timeout",
    "Subprotocol reason",
)
UNKNOWN_BUCKET = "unknown"
_BUCKET_CODES = {0x00: 0, 0x01: 1, 0x02: 2, 0x03: 3, 0x04: 4, 0x05: 5, 0x08: 6, 0x0B: 7, 0x10: 8}


def classify_disconnect(event: dict) -> str:
    """Map a terminal disconnect event onto the nine reason buckets."""
    reason = event.get("reason")
    if not isinstance(reason, int) or reason not in _BUCKET_CODES:
        return UNKNOWN_BUCKET
    return TAXONOMY[_BUCKET_CODES[reason]]


def negotiate(local: Iterable[Tuple[str, int]], remote: Iterable[Tuple[str, int]]) -> Caps:
    """Highest mutually supported version per capability name, name-sorted."""
    mine: Dict[str, set] = {}
    for name, version in local:
        mine.setdefault(name, set()).add(version)
    theirs: Dict[str, set] = {}
    for name, version in remote:
        theirs.setdefault(name, set()).add(version)
    out = []
    for name in sorted(mine.keys() & theirs.keys()):
        common = mine[name] & theirs[name]
        if common:
            out.append((name, max(common)))
    return tuple(out)


def capability_offsets(negotiated: Caps) -> Dict[str, int]:
    offsets = {}
    offset = codec.BASE_PROTOCOL_LENGTH
    for name, _ in negotiated:
        offsets[name] = offset
        offset += CAPABILITY_LENGTHS.get(name, 0)
    return offsets


def cap_strings(caps: Iterable[Tuple[str, int]]) -> List[str]:
    return [f"{n}/{v}" for n, v in caps]


class Phase(enum.IntEnum):
    DIAL_FAILED = 0
    SECURE_HANDSHAKE_FAILED = 1
    CONNECTED = 2
    HELLO_EXCHANGED = 3
    STATUS_EXCHANGED = 4
    ACTIVE = 5

    @property
    def label(self) -> str:
        return "".join(w.capitalize() for w in self.name.split("_"))


DEFAULT_REASONS = {
    "no_capability": USELESS_PEER,
    "incompatible_chain": USELESS_PEER,
    "malformed": BREACH_OF_PROTOCOL,
    "too_many_peers": TOO_MANY_PEERS,
    "idle": REQUESTED,
    "shutdown": CLIENT_QUITTING,
}


@dataclass
class SessionConfig:
    client_id: str
    capabilities: Caps
    chain: ChainConfig
    head: Head
    listen_port: int = 30303
    p2p_version: int = codec.P2P_VERSION
    hello_timeout: float = 5.0
    status_timeout: float = 5.0
    disconnect_incompatible: bool = True
    # seconds to keep an established session before closing it as idle; None waits indefinitely
    hold: Optional[float] = None
    reasons: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_REASONS))
    silent_close_probability: float = 0.0

    def reason(self, situation: str) -> int:
        return self.reasons.get(situation, DEFAULT_REASONS[situation])


@dataclass
class SessionOutcome:
    phase: Phase
    disconnect_reason: Optional[int] = None
    direction: Optional[str] = None
    remote_hello: Optional[Hello] = None
    remote_status: Optional[Status] = None
    fork_check: Optional[ForkCheck] = None
    negotiated: Caps = ()
    detail: str = ""

    @property
    def compatible(self) -> bool:
        return self.fork_check is ForkCheck.COMPATIBLE


class _Closed(Exception):
    """Internal: the session reached its terminal disconnect."""


class Session:
    def __init__(self, channel: SecureChannel, config: SessionConfig, *, node_id: bytes,
                 emit: Optional[EventFn] = None, clock: Callable[[], float],
                 rng: Optional[random.Random] = None, addr: str = "",
                 refuse_reason: Optional[int] = None) -> None:
        self.channel = channel
        self.config = config
        self.node_id = node_id
        self.emit: EventFn = emit or (lambda ev: None)
        self.clock = clock
        self.rng = rng or random.Random(0)
        self.addr = addr
        self.peer = channel.remote_id.hex()
        self.refuse_reason = refuse_reason
        self.outcome = SessionOutcome(Phase.CONNECTED)
        self._offsets: Dict[str, int] = {}
        self._finished = False

    # -- wire helpers ---------------------------------------------------

    def _msg_event(self, direction: str, msg, size: int) -> None:
        layer = "eth" if isinstance(msg, Status) else "rlpx"
        self.emit({"type": "message", "dir": direction, "layer": layer, "kind": type(msg).__name__,
                   "peer": self.peer, "addr": self.addr, "size": size, "body": _body(msg)})

    async def _send(self, msg) -> None:
        data = codec.encode_capability_message(msg, self._offsets.get("eth", codec.BASE_PROTOCOL_LENGTH))
        await self.channel.send(data)
        self._msg_event("out", msg, len(data))

    async def _recv(self, timeout: Optional[float]):
        """Next Hello/Disconnect/Status; answers p2p pings and skips other traffic."""
        while True:
            if timeout is None:
                data = await self.channel.recv()
            else:
                data = await asyncio.wait_for(self.channel.recv(), timeout)
            code = codec.message_code(data)
            if code == P2P_PING:
                await self.channel.send(rlp.encode(P2P_PONG) + rlp.encode([]))
                continue
            if code == P2P_PONG:
                continue
            eth = self._offsets.get("eth")
            if code in (HELLO, DISCONNECT) or (eth is not None and code == eth):
                msg = codec.decode_capability_message(data, eth if eth is not None else codec.BASE_PROTOCOL_LENGTH)
                self._msg_event("in", msg, len(data))
                return msg
            if self.outcome.phase < Phase.STATUS_EXCHANGED:
                raise codec.MalformedMessage(f"unexpected message 0x{code:02x} before handshake", "code")

    def _terminal(self, direction: str, reason: int, detail: str = "", silent: bool = False) -> None:
        if self._finished:
            return
        self._finished = True
        self.outcome.disconnect_reason = reason
        self.outcome.direction = direction
        self.outcome.detail = detail
        ev = {"type": "session", "kind": "Disconnect", "dir": direction, "reason": reason,
              "reasonName": codec.reason_name(reason), "phase": self.outcome.phase.label,
              "peer": self.peer, "addr": self.addr}
        ev["bucket"] = classify_disconnect(ev)
        if detail:
            ev["detail"] = detail
        if silent:
            ev["silent"] = True
        self.emit(ev)

    async def disconnect(self, reason: int, detail: str = "") -> None:
        """Send a Disconnect (unless this peer closes silently) and close."""
        silent = self.config.silent_close_probability > 0 and \
            self.rng.random() < self.config.silent_close_probability
        if not silent:
            try:
                await self._send(Disconnect(reason))
            except SessionError:
                pass
        self._terminal("sent", reason, detail, silent)
        self.channel.close()
        raise _Closed

    def _transport_failed(self, detail: str) -> None:
        self._terminal("received", TCP_ERROR, detail)
        self.channel.close()
        raise _Closed

    # -- lifecycle ------------------------------------------------------

    async def run(self) -> SessionOutcome:
        try:
            await self._run()
        except _Closed:
            pass
        except asyncio.CancelledError:
            # cooperative shutdown: tell the peer we are quitting
            if not self._finished:
                try:
                    await self.disconnect(self.config.reason("shutdown"), "shutdown")
                except _Closed:
                    pass
            raise
        return self.outcome

    async def _guard(self, coro):
        try:
            return await coro
        except asyncio.TimeoutError:
            self._transport_failed("timeout")
        except (TransportClosed, FrameMacError) as exc:
            self._transport_failed(f"{type(exc).__name__}: {exc}")
        except codec.MalformedMessage as exc:
            await self.disconnect(self.config.reason("malformed"), f"malformed: {exc}")

    async def _expect(self, kind, timeout):
        msg = await self._guard(self._recv(timeout))
        if isinstance(msg, Disconnect):
            self._terminal("received", msg.reason)
            self.channel.close()
            raise _Closed
        if not isinstance(msg, kind):
            await self.disconnect(self.config.reason("malformed"), f"expected {kind.__name__}")
        return msg

    async def _run(self) -> None:
        cfg = self.config
        hello = Hello(cfg.client_id, cfg.capabilities, cfg.listen_port, self.node_id, cfg.p2p_version)
        await self._guard(self._send(hello))
        remote = await self._expect(Hello, cfg.hello_timeout)
        self.outcome.remote_hello = remote
        self.outcome.phase = Phase.HELLO_EXCHANGED
        self.emit({"type": "session", "kind": "HelloExchanged", "peer": self.peer, "addr": self.addr,
                   "clientId": remote.client_id, "caps": cap_strings(remote.capabilities)})
        if self.refuse_reason is not None:
            await self.disconnect(self.refuse_reason, "refused")
        negotiated = negotiate(cfg.capabilities, remote.capabilities)
        self.outcome.negotiated = negotiated
        self._offsets = capability_offsets(negotiated)
        if "eth" not in self._offsets:
            await self.disconnect(cfg.reason("no_capability"), "no matching capability")
        eth_version = dict(negotiated)["eth"]
        await self._guard(self._send(cfg.chain.status(cfg.head, version=eth_version)))
        status = await self._expect(Status, cfg.status_timeout)
        self.outcome.remote_status = status
        self.outcome.phase = Phase.STATUS_EXCHANGED
        check = validate_fork_id(cfg.chain, ChainStatus.from_status(status), cfg.head)
        self.outcome.fork_check = check
        self.emit({"type": "session", "kind": "StatusCheck", "peer": self.peer, "addr": self.addr,
                   "result": check.value, **ChainStatus.from_status(status).to_json()})
        if check is ForkCheck.COMPATIBLE:
            self.outcome.phase = Phase.ACTIVE
        elif cfg.disconnect_incompatible:
            await self.disconnect(cfg.reason("incompatible_chain"), check.value)
        await self._idle()

    async def _idle(self) -> None:
        deadline = None if self.config.hold is None else self.clock() + self.config.hold
        while True:
            left = None if deadline is None else deadline - self.clock()
            if left is not None and left <= 0:
                await self.disconnect(self.config.reason("idle"), "idle")
            try:
                msg = await self._recv(left)
            except asyncio.TimeoutError:
                continue
            except (TransportClosed, FrameMacError) as exc:
                self._transport_failed(f"{type(exc).__name__}: {exc}")
            except codec.MalformedMessage as exc:
                await self.disconnect(self.config.reason("malformed"), f"malformed: {exc}")
            if isinstance(msg, Disconnect):
                self._terminal("received", msg.reason)
                self.channel.close()
                raise _Closed
            # a second Hello or Status mid-session is a protocol breach
            await self.disconnect(self.config.reason("malformed"), f"unexpected {type(msg).__name__}")


def _body(msg) -> dict:
    if isinstance(msg, Hello):
        return {"clientId": msg.client_id, "caps": cap_strings(msg.capabilities),
                "port": msg.listen_port, "version": msg.protocol_version}
    if isinstance(msg, Status):
        return {"version": msg.protocol_version, **ChainStatus.from_status(msg).to_json()}
    if isinstance(msg, Disconnect):
        return {"reason": msg.reason, "reasonName": msg.reason_name}
    return {}


async def open_session(connect, channel_cls, key: bytes, remote_id: bytes, ip: str, port: int,
                       config: SessionConfig, *, emit: Optional[EventFn] = None,
                       clock: Callable[[], float], rng: Optional[random.Random] = None,
                       connect_timeout: float = 5.0) -> SessionOutcome:
    """Dial, run the secure handshake as initiator, then the session."""
    emit = emit or (lambda ev: None)
    addr = f"{ip}:{port}"
    peer = remote_id.hex()
    try:
        reader, writer = await asyncio.wait_for(connect(ip, port), connect_timeout)
    except (OSError, asyncio.TimeoutError) as exc:
        emit({"type": "session", "kind": "DialFailed", "peer": peer, "addr": addr,
              "error": type(exc).__name__})
        return SessionOutcome(Phase.DIAL_FAILED, detail=type(exc).__name__)
    try:
        channel = await asyncio.wait_for(
            channel_cls.initiate(reader, writer, key, remote_id, rng), connect_timeout)
    except (SessionError, asyncio.TimeoutError) as exc:
        writer.close()
        emit({"type": "session", "kind": "Disconnect", "dir": "received", "reason": TCP_ERROR,
              "reasonName": codec.reason_name(TCP_ERROR), "bucket": TAXONOMY[1],
              "phase": Phase.SECURE_HANDSHAKE_FAILED.label, "peer": peer, "addr": addr,
              "detail": f"{type(exc).__name__}: {exc}"})
        return SessionOutcome(Phase.SECURE_HANDSHAKE_FAILED, TCP_ERROR, "received",
                              detail=type(exc).__name__)
    session = Session(channel, config, node_id=private_to_public(key), emit=emit, clock=clock, rng=rng,
                      addr=addr)
    return await session.run()


async def accept_session(reader, writer, channel_cls, key: bytes, config: SessionConfig, *,
                         emit: Optional[EventFn] = None, clock: Callable[[], float],
                         rng: Optional[random.Random] = None, addr: str = "",
                         refuse_reason: Optional[int] = None,
                         handshake_timeout: float = 5.0) -> SessionOutcome:
    """Responder side: secure handshake, then the session."""
    try:
        channel = await asyncio.wait_for(channel_cls.accept(reader, writer, key, rng), handshake_timeout)
    except (SessionError, asyncio.TimeoutError) as exc:
        writer.close()
        return SessionOutcome(Phase.SECURE_HANDSHAKE_FAILED, TCP_ERROR, "received",
                              detail=type(exc).__name__)
    session = Session(channel, config, node_id=private_to_public(key), emit=emit, clock=clock,
                      rng=rng, addr=addr, refuse_reason=refuse_reason)
    return await session.run()
