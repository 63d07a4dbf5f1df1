"""discv4 datagrams and RLPx capability messages.

Datagram layout: ``hash(32) || signature(65) || type(1) || rlp(body)``,
``hash = keccak(signature || type || body)`` and the signature covers
``keccak(type || body)``. The sender's identity is recovered from the
signature, never read from the body.
"""
from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from . import crypto, rlp
from .rlp import bytes_to_int

MAX_PACKET_SIZE = 1280
MAX_NEIGHBORS = 16
HEAD_SIZE = 32 + 65
DISCOVERY_VERSION = 4
EXPIRATION_WINDOW = 20  # seconds; packets older than this are stale
MAX_RECORD_SIZE = 300


class CodecError(Exception):
    pass


class TruncatedPacket(CodecError):
    pass


class BadSignature(CodecError):
    pass


class BadHash(BadSignature):
    """Integrity hash mismatch. The hash covers the signature, so any
    tampering with the signature region surfaces here."""


class UnknownPacketType(CodecError):
    pass


class InvalidBody(CodecError):
    pass


class OversizePacket(CodecError):
    pass


class MalformedMessage(CodecError):
    def __init__(self, message: str, position: str = "") -> None:
        super().__init__(f"{message} [at {position}]" if position else message)
        self.position = position


# -- identities and endpoints -----------------------------------------------


@dataclass(frozen=True)
class NodeIdentity:
    node_id: bytes
    table_key: bytes = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.node_id) != 64:
            raise ValueError(f"node id must be 64 bytes, got {len(self.node_id)}")
        object.__setattr__(self, "table_key", crypto.keccak256(self.node_id))

    @property
    def public_key(self) -> bytes:
        return self.node_id

    @property
    def hex(self) -> str:
        return self.node_id.hex()

    def __repr__(self) -> str:
        return f"NodeIdentity({self.node_id[:6].hex()}…)"


def derive_identity(private_key: bytes) -> NodeIdentity:
    """Identity for a secp256k1 private key; raises ``InvalidScalar``."""
    return NodeIdentity(crypto.private_to_public(private_key))


@dataclass(frozen=True)
class Endpoint:
    ip: str
    udp_port: int
    tcp_port: int

    def __post_init__(self) -> None:
        addr = ipaddress.ip_address(self.ip)
        object.__setattr__(self, "ip", str(addr))
        for port in (self.udp_port, self.tcp_port):
            if not 0 <= port <= 0xFFFF:
                raise ValueError(f"port out of range: {port}")

    @property
    def address(self) -> Union[ipaddress.IPv4Address, ipaddress.IPv6Address]:
        return ipaddress.ip_address(self.ip)

    @property
    def udp_addr(self) -> Tuple[str, int]:
        return self.ip, self.udp_port

    def to_rlp(self) -> list:
        return [self.address.packed, self.udp_port, self.tcp_port]

    @classmethod
    def from_rlp(cls, item, where: str = "endpoint") -> "Endpoint":
        if not isinstance(item, list) or len(item) < 3:
            raise InvalidBody(f"{where}: expected [ip, udp, tcp]")
        ip_raw, udp, tcp = item[:3]
        if not isinstance(ip_raw, bytes) or len(ip_raw) not in (4, 16):
            raise InvalidBody(f"{where}: ip must be 4 or 16 bytes")
        return cls(str(ipaddress.ip_address(ip_raw)), _uint(udp, where, 16), _uint(tcp, where, 16))


def _uint(item, where: str, bits: int = 64) -> int:
    if not isinstance(item, bytes):
        raise InvalidBody(f"{where}: expected integer, got list")
    try:
        value = bytes_to_int(item)
    except rlp.RLPError as exc:
        raise InvalidBody(f"{where}: {exc}") from None
    if value >> bits:
        raise InvalidBody(f"{where}: integer exceeds {bits} bits")
    return value


def _fixed(item, n: int, where: str) -> bytes:
    if not isinstance(item, bytes) or len(item) != n:
        raise InvalidBody(f"{where}: expected {n} bytes")
    return item


# -- node records -----------------------------------------------------------


@dataclass(frozen=True)
class NodeRecord:
    """Signed node record (``v4`` identity scheme).

    ``pairs`` keeps every key/value in key order; values we do not interpret
    are carried as raw RLP items.
    """

    seq: int
    signature: bytes
    pairs: Tuple[Tuple[bytes, object], ...]

    @classmethod
    def create(cls, private_key: bytes, seq: int, endpoint: Endpoint,
               extra: Optional[Dict[bytes, object]] = None) -> "NodeRecord":
        kv: Dict[bytes, object] = dict(extra or {})
        kv[b"id"] = b"v4"
        kv[b"secp256k1"] = crypto.compress_public(crypto.private_to_public(private_key))
        key = b"ip" if endpoint.address.version == 4 else b"ip6"
        kv[key] = endpoint.address.packed
        kv[b"udp"] = rlp.int_to_bytes(endpoint.udp_port)
        kv[b"tcp"] = rlp.int_to_bytes(endpoint.tcp_port)
        pairs = tuple(sorted(kv.items()))
        digest = crypto.keccak256(rlp.encode(cls._content(seq, pairs)))
        sig = crypto.sign(digest, private_key)[:64]
        return cls(seq, sig, pairs)

    @staticmethod
    def _content(seq: int, pairs) -> list:
        out: list = [seq]
        for k, v in pairs:
            out.extend([k, v])
        return out

    def get(self, key: bytes):
        for k, v in self.pairs:
            if k == key:
                return v
        return None

    @property
    def compressed_key(self) -> Optional[bytes]:
        return self.get(b"secp256k1")

    @property
    def identity(self) -> NodeIdentity:
        return NodeIdentity(crypto.decompress_public(self.compressed_key))

    @property
    def endpoint(self) -> Optional[Endpoint]:
        ip = self.get(b"ip") or self.get(b"ip6")
        if ip is None:
            return None
        udp = bytes_to_int(self.get(b"udp") or b"", strict=False)
        tcp = bytes_to_int(self.get(b"tcp") or b"", strict=False)
        return Endpoint(str(ipaddress.ip_address(ip)), udp, tcp)

    def verify(self) -> bool:
        key = self.compressed_key
        if self.get(b"id") != b"v4" or not isinstance(key, bytes) or len(key) != 33:
            return False
        digest = crypto.keccak256(rlp.encode(self._content(self.seq, self.pairs)))
        return crypto.verify(digest, self.signature, key)

    def to_rlp(self) -> list:
        return [self.signature] + self._content(self.seq, self.pairs)

    @classmethod
    def from_rlp(cls, item) -> "NodeRecord":
        if not isinstance(item, list) or len(item) < 2 or len(item) % 2:
            raise InvalidBody("record: expected [sig, seq, k, v, ...]")
        sig = _fixed(item[0], 64, "record.signature")
        seq = _uint(item[1], "record.seq")
        pairs = []
        for i in range(2, len(item), 2):
            k = item[i]
            if not isinstance(k, bytes):
                raise InvalidBody("record: key must be a string")
            pairs.append((k, item[i + 1]))
        keys = [k for k, _ in pairs]
        if keys != sorted(keys) or len(set(keys)) != len(keys):
            raise InvalidBody("record: keys must be sorted and unique")
        if len(rlp.encode(item)) > MAX_RECORD_SIZE:
            raise InvalidBody("record exceeds 300 bytes")
        return cls(seq, sig, tuple(pairs))


# -- discovery packet bodies ------------------------------------------------


@dataclass(frozen=True)
class Ping:
    from_endpoint: Endpoint
    to_endpoint: Endpoint
    expiration: int
    enr_seq: Optional[int] = None
    version: int = DISCOVERY_VERSION

    def to_rlp(self) -> list:
        out = [self.version, self.from_endpoint.to_rlp(), self.to_endpoint.to_rlp(),
               self.expiration]
        if self.enr_seq is not None:
            out.append(self.enr_seq)
        return out

    @classmethod
    def from_rlp(cls, item) -> "Ping":
        _need(item, 4, "Ping")
        seq = _uint(item[4], "Ping.enr_seq") if len(item) > 4 else None
        return cls(Endpoint.from_rlp(item[1], "Ping.from"), Endpoint.from_rlp(item[2], "Ping.to"),
                   _uint(item[3], "Ping.expiration"), seq, _uint(item[0], "Ping.version"))


@dataclass(frozen=True)
class Pong:
    to_endpoint: Endpoint
    ping_hash: bytes
    expiration: int
    enr_seq: Optional[int] = None

    def to_rlp(self) -> list:
        out = [self.to_endpoint.to_rlp(), self.ping_hash, self.expiration]
        if self.enr_seq is not None:
            out.append(self.enr_seq)
        return out

    @classmethod
    def from_rlp(cls, item) -> "Pong":
        _need(item, 3, "Pong")
        seq = _uint(item[3], "Pong.enr_seq") if len(item) > 3 else None
        return cls(Endpoint.from_rlp(item[0], "Pong.to"), _fixed(item[1], 32, "Pong.ping_hash"),
                   _uint(item[2], "Pong.expiration"), seq)


@dataclass(frozen=True)
class FindNode:
    target: bytes
    expiration: int

    def to_rlp(self) -> list:
        return [self.target, self.expiration]

    @classmethod
    def from_rlp(cls, item) -> "FindNode":
        _need(item, 2, "FindNode")
        return cls(_fixed(item[0], 64, "FindNode.target"), _uint(item[1], "FindNode.expiration"))


@dataclass(frozen=True)
class NeighborNode:
    endpoint: Endpoint
    node_id: bytes

    def to_rlp(self) -> list:
        return self.endpoint.to_rlp() + [self.node_id]


@dataclass(frozen=True)
class Neighbors:
    nodes: Tuple[NeighborNode, ...]
    expiration: int

    def to_rlp(self) -> list:
        return [[n.to_rlp() for n in self.nodes], self.expiration]

    @classmethod
    def from_rlp(cls, item) -> "Neighbors":
        _need(item, 2, "Neighbors")
        if not isinstance(item[0], list):
            raise InvalidBody("Neighbors.nodes: expected list")
        if len(item[0]) > MAX_NEIGHBORS:
            raise InvalidBody(f"Neighbors lists {len(item[0])} nodes, limit is {MAX_NEIGHBORS}")
        nodes = []
        for i, n in enumerate(item[0]):
            where = f"Neighbors.nodes[{i}]"
            if not isinstance(n, list) or len(n) < 4:
                raise InvalidBody(f"{where}: expected [ip, udp, tcp, id]")
            nodes.append(NeighborNode(Endpoint.from_rlp(n[:3], where), _fixed(n[3], 64, where + ".id")))
        return cls(tuple(nodes), _uint(item[1], "Neighbors.expiration"))


@dataclass(frozen=True)
class ENRRequest:
    expiration: int

    def to_rlp(self) -> list:
        return [self.expiration]

    @classmethod
    def from_rlp(cls, item) -> "ENRRequest":
        _need(item, 1, "ENRRequest")
        return cls(_uint(item[0], "ENRRequest.expiration"))


@dataclass(frozen=True)
class ENRResponse:
    request_hash: bytes
    record: NodeRecord

    def to_rlp(self) -> list:
        return [self.request_hash, self.record.to_rlp()]

    @classmethod
    def from_rlp(cls, item) -> "ENRResponse":
        _need(item, 2, "ENRResponse")
        return cls(_fixed(item[0], 32, "ENRResponse.request_hash"), NodeRecord.from_rlp(item[1]))


def _need(item, n: int, name: str) -> None:
    if not isinstance(item, list) or len(item) < n:
        raise InvalidBody(f"{name}: expected list of at least {n} elements")


PacketBody = Union[Ping, Pong, FindNode, Neighbors, ENRRequest, ENRResponse]

PACKET_TYPES: Dict[int, type] = {
    1: Ping, 2: Pong, 3: FindNode, 4: Neighbors, 5: ENRRequest, 6: ENRResponse,
}
TYPE_CODES = {cls: code for code, cls in PACKET_TYPES.items()}


@dataclass(frozen=True)
class DiscoveryPacket:
    body: PacketBody
    sender: NodeIdentity
    packet_hash: bytes
    size: int

    @property
    def kind(self) -> str:
        return type(self.body).__name__


def encode_packet(body: PacketBody, private_key: bytes) -> bytes:
    code = TYPE_CODES.get(type(body))
    if code is None:
        raise InvalidBody(f"not a discovery packet body: {type(body).__name__}")
    if isinstance(body, Neighbors) and len(body.nodes) > MAX_NEIGHBORS:
        raise InvalidBody(f"Neighbors may list at most {MAX_NEIGHBORS} nodes")
    try:
        payload = bytes([code]) + rlp.encode(body.to_rlp())
    except (TypeError, ValueError) as exc:
        raise InvalidBody(str(exc)) from None
    size = HEAD_SIZE + len(payload)
    if size > MAX_PACKET_SIZE:
        raise OversizePacket(f"{type(body).__name__} encodes to {size} bytes (limit {MAX_PACKET_SIZE})")
    sig = crypto.sign(crypto.keccak256(payload), private_key)
    return crypto.keccak256(sig + payload) + sig + payload


def encoded_size(body: PacketBody) -> int:
    """Datagram size ``encode_packet`` would produce, without signing."""
    return HEAD_SIZE + 1 + len(rlp.encode(body.to_rlp()))


def decode_packet(datagram: bytes) -> DiscoveryPacket:
    data = bytes(datagram)
    if len(data) < HEAD_SIZE + 1:
        raise TruncatedPacket(f"datagram of {len(data)} bytes is shorter than the header")
    mdc, sig, payload = data[:32], data[32:97], data[97:]
    if crypto.keccak256(sig + payload) != mdc:
        raise BadHash("packet hash does not match contents")
    try:
        pub = crypto.recover(crypto.keccak256(payload), sig)
    except crypto.CryptoError as exc:
        raise BadSignature(str(exc)) from None
    cls = PACKET_TYPES.get(payload[0])
    if cls is None:
        raise UnknownPacketType(f"unknown packet type 0x{payload[0]:02x}")
    try:
        item, _ = rlp.decode_prefix(payload[1:])  # trailing data tolerated
    except rlp.RLPError as exc:
        raise InvalidBody(f"{cls.__name__}: {exc}") from None
    try:
        body = cls.from_rlp(item)
    except ValueError as exc:
        raise InvalidBody(f"{cls.__name__}: {exc}") from None
    return DiscoveryPacket(body, NodeIdentity(pub), mdc, len(data))


def split_neighbors(nodes: Sequence[NeighborNode], expiration: int,
                    limit: int = MAX_PACKET_SIZE) -> List[Neighbors]:
    """Pack nodes into as few Neighbors bodies as fit under ``limit``.

    The per-datagram count is sized for the largest possible node entry
    (IPv6 address, 16-bit ports) so every datagram fits regardless of which
    nodes land in it; for 16 nodes this yields a 12 + 4 split.
    """
    per = max_neighbors_per_packet(expiration, limit)
    nodes = list(nodes)
    return [Neighbors(tuple(nodes[i:i + per]), expiration) for i in range(0, len(nodes), per)] or \
        [Neighbors((), expiration)]


def max_neighbors_per_packet(expiration: int = 2 ** 32 - 1, limit: int = MAX_PACKET_SIZE) -> int:
    widest = NeighborNode(Endpoint("ffff:ffff:ffff:ffff:ffff:ffff:ffff:ffff", 0xFFFF, 0xFFFF),
                          b"\xff" * 64)
    n = 0
    while n < MAX_NEIGHBORS and encoded_size(Neighbors((widest,) * (n + 1), expiration)) <= limit:
        n += 1
    return n


# -- RLPx capability messages -------------------------------------------------

P2P_VERSION = 5
BASE_PROTOCOL_LENGTH = 16

HELLO, DISCONNECT, P2P_PING, P2P_PONG = 0x00, 0x01, 0x02, 0x03
STATUS = 0x00  # relative to the eth offset

DISCONNECT_REASONS: Dict[int, str] = {
    0x00: "Disconnect requested",
    0x01: "TCP sub-system error",
    0x02: "Breach of protocol",
    0x03: "Useless peer",
    0x04: "Too many peers",
    0x05: "Already connected",
    0x06: "Incompatible P2P protocol version",
    0x07: "Null node identity received",
    0x08: "Client quitting",
    0x09: "Unexpected identity",
    0x0A: "Connected to self",
    0x0B: "Ping timeout",
    0x10: "Subprotocol reason",
}
REQUESTED, TCP_ERROR, BREACH_OF_PROTOCOL, USELESS_PEER, TOO_MANY_PEERS = 0, 1, 2, 3, 4
ALREADY_CONNECTED, CLIENT_QUITTING, PING_TIMEOUT, SUBPROTOCOL_REASON = 5, 8, 0x0B, 0x10


def reason_name(code: int) -> str:
    return DISCONNECT_REASONS.get(code, f"unknown({code})")


@dataclass(frozen=True)
class ForkId:
    fork_hash: bytes
    fork_next: int = 0

    def __post_init__(self) -> None:
        if len(self.fork_hash) != 4:
            raise ValueError("fork hash must be 4 bytes")

    def __str__(self) -> str:
        return f"{self.fork_hash.hex()}/{self.fork_next:x}"

    @classmethod
    def parse(cls, text: str) -> "ForkId":
        h, _, nxt = text.partition("/")
        return cls(bytes.fromhex(h), int(nxt or "0", 16))


@dataclass(frozen=True)
class Hello:
    client_id: str
    capabilities: Tuple[Tuple[str, int], ...]
    listen_port: int
    node_id: bytes
    protocol_version: int = P2P_VERSION

    def __post_init__(self) -> None:
        object.__setattr__(self, "capabilities", tuple((str(n), int(v)) for n, v in self.capabilities))
        if len(set(self.capabilities)) != len(self.capabilities):
            raise MalformedMessage("duplicate capability in Hello", "Hello.capabilities")


@dataclass(frozen=True)
class Disconnect:
    reason: int

    @property
    def reason_name(self) -> str:
        return reason_name(self.reason)


@dataclass(frozen=True)
class Status:
    protocol_version: int
    network_id: int
    genesis_hash: bytes
    fork_id: ForkId
    head_hash: bytes
    total_difficulty: int = 0


CapabilityMessage = Union[Hello, Disconnect, Status]


def encode_capability_message(msg: CapabilityMessage, eth_offset: int = BASE_PROTOCOL_LENGTH) -> bytes:
    """``rlp(code) || rlp(body)`` as carried inside an RLPx frame."""
    if isinstance(msg, Hello):
        code = HELLO
        body = [msg.protocol_version, msg.client_id.encode(),
                [[n.encode(), v] for n, v in msg.capabilities], msg.listen_port, msg.node_id]
    elif isinstance(msg, Disconnect):
        code, body = DISCONNECT, [msg.reason]
    elif isinstance(msg, Status):
        code = eth_offset + STATUS
        body = [msg.protocol_version, msg.network_id, msg.total_difficulty, msg.head_hash,
                msg.genesis_hash, [msg.fork_id.fork_hash, msg.fork_id.fork_next]]
    else:
        raise TypeError(f"not a capability message: {type(msg).__name__}")
    return rlp.encode(code) + rlp.encode(body)


def message_code(data: bytes) -> int:
    try:
        code, _ = rlp.decode_prefix(data)
    except rlp.RLPError as exc:
        raise MalformedMessage(str(exc), "code") from None
    if not isinstance(code, bytes):
        raise MalformedMessage("message code must be an integer", "code")
    return int.from_bytes(code, "big")


def decode_capability_message(data: bytes, eth_offset: int = BASE_PROTOCOL_LENGTH) -> CapabilityMessage:
    try:
        code_item, used = rlp.decode_prefix(data)
        if not isinstance(code_item, bytes):
            raise MalformedMessage("message code must be an integer", "code")
        code = int.from_bytes(code_item, "big")
        rest = data[used:]
        body = rlp.decode(rest) if rest else []
    except rlp.RLPError as exc:
        raise MalformedMessage(str(exc), f"byte {exc.offset}") from None
    if code == HELLO:
        return _hello_from(body)
    if code == DISCONNECT:
        # some clients send the bare reason instead of a one-element list
        raw = body[0] if isinstance(body, list) and body else body
        if raw == []:
            return Disconnect(REQUESTED)
        if isinstance(raw, list):
            raise MalformedMessage("reason must be an integer", "Disconnect[0]")
        return Disconnect(int.from_bytes(raw, "big") if raw else 0)
    if code == eth_offset + STATUS:
        return _status_from(body)
    raise MalformedMessage(f"unsupported message code 0x{code:02x}", "code")


def _field(body, i: int, where: str, n: Optional[int] = None) -> bytes:
    if not isinstance(body, list) or len(body) <= i:
        raise MalformedMessage("missing field", f"{where}[{i}]")
    v = body[i]
    if not isinstance(v, bytes) or (n is not None and len(v) != n):
        raise MalformedMessage(f"expected {n or 'a'} byte string", f"{where}[{i}]")
    return v


def _int(body, i: int, where: str, bits: int = 64) -> int:
    raw = _field(body, i, where)
    if raw[:1] == b"\x00":
        raise MalformedMessage("integer has leading zero", f"{where}[{i}]")
    v = int.from_bytes(raw, "big")
    if v >> bits:
        raise MalformedMessage(f"integer exceeds {bits} bits", f"{where}[{i}]")
    return v


def _hello_from(body) -> Hello:
    version = _int(body, 0, "Hello")
    try:
        client = _field(body, 1, "Hello").decode()
    except UnicodeDecodeError:
        raise MalformedMessage("client id is not UTF-8", "Hello[1]") from None
    caps_raw = body[2] if len(body) > 2 else None
    if not isinstance(caps_raw, list):
        raise MalformedMessage("capabilities must be a list", "Hello[2]")
    caps = []
    for i, c in enumerate(caps_raw):
        where = f"Hello[2][{i}]"
        if not isinstance(c, list) or len(c) < 2 or not isinstance(c[0], bytes):
            raise MalformedMessage("capability must be [name, version]", where)
        caps.append((c[0].decode(errors="replace"), _int(c, 1, where, 32)))
    port = _int(body, 3, "Hello", 16)
    node_id = _field(body, 4, "Hello", 64)
    return Hello(client, tuple(caps), port, node_id, version)


def _status_from(body) -> Status:
    version = _int(body, 0, "Status", 32)
    network = _int(body, 1, "Status")
    td = _int(body, 2, "Status", 256)
    head = _field(body, 3, "Status", 32)
    genesis = _field(body, 4, "Status", 32)
    fid = body[5] if isinstance(body, list) and len(body) > 5 else None
    if not isinstance(fid, list) or len(fid) < 2:
        raise MalformedMessage("fork id must be [hash, next]", "Status[5]")
    fork = ForkId(_field(fid, 0, "Status[5]", 4), _int(fid, 1, "Status[5]"))
    return Status(version, network, genesis, fork, head, td)


# -- debug rendering --------------------------------------------------------


def describe(value) -> object:
    """JSON-friendly view of a decoded packet or message."""
    if isinstance(value, DiscoveryPacket):
        return {"kind": value.kind, "sender": value.sender.hex, "hash": value.packet_hash.hex(),
                "size": value.size, "body": describe(value.body)}
    if isinstance(value, bytes):
        return "0x" + value.hex()
    if isinstance(value, Endpoint):
        return {"ip": value.ip, "udp": value.udp_port, "tcp": value.tcp_port}
    if isinstance(value, ForkId):
        return str(value)
    if isinstance(value, NodeRecord):
        return {"seq": value.seq, "signature": describe(value.signature),
                "pairs": {k.decode(errors="replace"): describe(v) for k, v in value.pairs}}
    if isinstance(value, (list, tuple)):
        return [describe(v) for v in value]
    if hasattr(value, "__dataclass_fields__"):
        out = {"kind": type(value).__name__}
        for name in value.__dataclass_fields__:
            out[name] = describe(getattr(value, name))
        if isinstance(value, Disconnect):
            out["reason_name"] = value.reason_name
        return out
    return value

