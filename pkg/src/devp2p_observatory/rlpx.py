"""Secure channels for RLPx sessions.

Two implementations share one interface: :class:`RLPxChannel` performs the
ECIES auth/ack handshake (EIP-8 encoding) and speaks MAC-checked AES-CTR
frames; :class:`LoopbackChannel` is a cheap authenticated channel used by the
simulated network, where only identity binding and integrity matter.

Streams are duck-typed: a reader with ``readexactly(n)`` and a writer with
``write(data)`` and ``close()`` (asyncio streams qualify).
"""
from __future__ import annotations

import asyncio
import hashlib
import hmac
import os
import random
from secrets import randbelow
from dataclasses import dataclass
from typing import Optional

from Crypto.Cipher import AES

from . import crypto, rlp

HANDSHAKE_VERSION = 4
ECIES_OVERHEAD = 65 + 16 + 32
MAX_FRAME = 0xFFFFFF


class SessionError(Exception):
    pass


class SecureHandshakeFailed(SessionError):
    pass


class FrameMacError(SessionError):
    pass


class TransportClosed(SessionError):
    pass


@dataclass(frozen=True)
class Secrets:
    aes: bytes
    mac: bytes
    egress_seed: bytes
    ingress_seed: bytes


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


async def _read(reader, n: int) -> bytes:
    try:
        return await reader.readexactly(n)
    except asyncio.IncompleteReadError as exc:
        raise TransportClosed(f"stream ended after {len(exc.partial)} of {n} bytes") from None
    except (ConnectionError, OSError) as exc:
        raise TransportClosed(str(exc) or type(exc).__name__) from None


class SecureChannel:
    """Message-oriented, authenticated duplex channel."""

    remote_id: bytes
    secrets: Secrets

    def __init__(self, reader, writer) -> None:
        self.reader = reader
        self.writer = writer
        self.closed = False

    async def send(self, payload: bytes) -> None:
        raise NotImplementedError

    async def recv(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.writer.close()

    def _write(self, data: bytes) -> None:
        if self.closed:
            raise TransportClosed("channel already closed")
        try:
            self.writer.write(data)
        except (ConnectionError, OSError) as exc:
            raise TransportClosed(str(exc)) from None


# -- RLPx -----------------------------------------------------------------


def _pad(rng: Optional[random.Random]) -> bytes:
    if rng is None:
        return os.urandom(100 + randbelow(151))
    return rng.randbytes(rng.randint(100, 250))


def _nonce(rng: Optional[random.Random]) -> bytes:
    return rng.randbytes(32) if rng is not None else os.urandom(32)


def _seal(remote_pub: bytes, body: bytes, rng) -> bytes:
    prefix = (len(body) + ECIES_OVERHEAD).to_bytes(2, "big")
    return prefix + crypto.ecies_encrypt(remote_pub, body, prefix, rng)


async def _read_sealed(reader, key: bytes) -> tuple:
    prefix = await _read(reader, 2)
    size = int.from_bytes(prefix, "big")
    if size < ECIES_OVERHEAD:
        raise SecureHandshakeFailed("handshake message too short")
    ct = await _read(reader, size)
    try:
        body = crypto.ecies_decrypt(key, ct, prefix)
        items, _ = rlp.decode_prefix(body)  # trailing bytes are padding
    except (crypto.CryptoError, rlp.RLPError) as exc:
        raise SecureHandshakeFailed(f"cannot open handshake message: {exc}") from None
    if not isinstance(items, list):
        raise SecureHandshakeFailed("handshake body is not a list")
    return prefix + ct, items


def derive_secrets(eph_shared: bytes, initiator_nonce: bytes, recipient_nonce: bytes,
                   auth: bytes, ack: bytes, initiator: bool) -> Secrets:
    shared = crypto.keccak256(eph_shared + crypto.keccak256(recipient_nonce + initiator_nonce))
    aes = crypto.keccak256(eph_shared + shared)
    mac = crypto.keccak256(eph_shared + aes)
    i_seed = _xor(mac, recipient_nonce) + auth
    r_seed = _xor(mac, initiator_nonce) + ack
    if initiator:
        return Secrets(aes, mac, i_seed, r_seed)
    return Secrets(aes, mac, r_seed, i_seed)


class RLPxChannel(SecureChannel):
    def __init__(self, reader, writer, secrets: Secrets, remote_id: bytes) -> None:
        super().__init__(reader, writer)
        self.secrets = secrets
        self.remote_id = remote_id
        self._enc = AES.new(secrets.aes, AES.MODE_CTR, nonce=b"", initial_value=bytes(16))
        self._dec = AES.new(secrets.aes, AES.MODE_CTR, nonce=b"", initial_value=bytes(16))
        self._mac_aes = AES.new(secrets.mac, AES.MODE_ECB)
        self._egress = crypto.Keccak256(secrets.egress_seed)
        self._ingress = crypto.Keccak256(secrets.ingress_seed)

    @classmethod
    async def initiate(cls, reader, writer, key: bytes, remote_pub: bytes,
                       rng: Optional[random.Random] = None) -> "RLPxChannel":
        nonce = _nonce(rng)
        eph = crypto.generate_private_key(rng)
        try:
            token = crypto.ecdh(key, remote_pub)
        except crypto.CryptoError as exc:
            raise SecureHandshakeFailed(f"bad remote key: {exc}") from None
        sig = crypto.sign(_xor(token, nonce), eph)
        body = rlp.encode([sig, crypto.private_to_public(key), nonce, HANDSHAKE_VERSION]) + _pad(rng)
        auth = _seal(remote_pub, body, rng)
        writer.write(auth)
        ack, items = await _read_sealed(reader, key)
        if len(items) < 2 or not all(isinstance(x, bytes) for x in items[:2]):
            raise SecureHandshakeFailed("malformed ack")
        remote_eph, remote_nonce = items[0], items[1]
        if len(remote_eph) != 64 or len(remote_nonce) != 32:
            raise SecureHandshakeFailed("malformed ack fields")
        try:
            eph_shared = crypto.ecdh(eph, remote_eph)
        except crypto.CryptoError as exc:
            raise SecureHandshakeFailed(str(exc)) from None
        secrets = derive_secrets(eph_shared, nonce, remote_nonce, auth, ack, initiator=True)
        return cls(reader, writer, secrets, remote_pub)

    @classmethod
    async def accept(cls, reader, writer, key: bytes,
                     rng: Optional[random.Random] = None) -> "RLPxChannel":
        auth, items = await _read_sealed(reader, key)
        if len(items) < 3 or not all(isinstance(x, bytes) for x in items[:3]):
            raise SecureHandshakeFailed("malformed auth")
        sig, init_pub, init_nonce = items[:3]
        if len(sig) != 65 or len(init_pub) != 64 or len(init_nonce) != 32:
            raise SecureHandshakeFailed("malformed auth fields")
        try:
            token = crypto.ecdh(key, init_pub)
            remote_eph = crypto.recover(_xor(token, init_nonce), sig)
        except crypto.CryptoError as exc:
            raise SecureHandshakeFailed(str(exc)) from None
        nonce = _nonce(rng)
        eph = crypto.generate_private_key(rng)
        body = rlp.encode([crypto.private_to_public(eph), nonce, HANDSHAKE_VERSION]) + _pad(rng)
        ack = _seal(init_pub, body, rng)
        writer.write(ack)
        eph_shared = crypto.ecdh(eph, remote_eph)
        secrets = derive_secrets(eph_shared, init_nonce, nonce, auth, ack, initiator=False)
        return cls(reader, writer, secrets, init_pub)

    def _mac_step(self, mac: crypto.Keccak256, seed: bytes) -> bytes:
        mac.update(_xor(self._mac_aes.encrypt(mac.digest()[:16]), seed))
        return mac.digest()[:16]

    async def send(self, payload: bytes) -> None:
        if len(payload) > MAX_FRAME:
            raise SessionError("frame too large")
        header = (len(payload).to_bytes(3, "big") + b"\xc2\x80\x80").ljust(16, b"\x00")
        header_ct = self._enc.encrypt(header)
        header_mac = self._mac_step(self._egress, header_ct)
        padded = payload + b"\x00" * (-len(payload) % 16)
        frame_ct = self._enc.encrypt(padded)
        self._egress.update(frame_ct)
        frame_mac = self._mac_step(self._egress, self._egress.digest()[:16])
        self._write(header_ct + header_mac + frame_ct + frame_mac)

    async def recv(self) -> bytes:
        head = await _read(self.reader, 32)
        header_ct, header_mac = head[:16], head[16:]
        if not hmac.compare_digest(self._mac_step(self._ingress, header_ct), header_mac):
            raise FrameMacError("header MAC mismatch")
        size = int.from_bytes(self._dec.decrypt(header_ct)[:3], "big")
        padded = size + (-size % 16)
        body = await _read(self.reader, padded + 16)
        frame_ct, frame_mac = body[:padded], body[padded:]
        self._ingress.update(frame_ct)
        if not hmac.compare_digest(self._mac_step(self._ingress, self._ingress.digest()[:16]), frame_mac):
            raise FrameMacError("frame MAC mismatch")
        return self._dec.decrypt(frame_ct)[:size]


# -- simulated-network loopback ---------------------------------------------

_LB_MAGIC = b"LB1"
_LB_HELLO = len(_LB_MAGIC) + 64 + 32 + 16


def _lb_tag(key_material: bytes, data: bytes) -> bytes:
    return hmac.new(crypto.keccak256(key_material), data, hashlib.sha256).digest()[:16]


class LoopbackChannel(SecureChannel):
    """Length-prefixed frames with per-direction HMAC and sequence numbers.

    The opening exchange binds both static public keys: a responder whose key
    differs from the one the initiator expects cannot produce a valid tag.
    Payloads travel in clear; this channel exists for in-process simulation.
    """

    def __init__(self, reader, writer, secrets: Secrets, remote_id: bytes) -> None:
        super().__init__(reader, writer)
        self.secrets = secrets
        self.remote_id = remote_id
        self._out_seq = 0
        self._in_seq = 0

    @classmethod
    async def initiate(cls, reader, writer, key: bytes, remote_pub: bytes,
                       rng: Optional[random.Random] = None) -> "LoopbackChannel":
        own = crypto.private_to_public(key)
        nonce = _nonce(rng)
        writer.write(_LB_MAGIC + own + nonce + _lb_tag(remote_pub + own, nonce))
        reply = await _read(reader, _LB_HELLO)
        if reply[:3] != _LB_MAGIC:
            raise SecureHandshakeFailed("unexpected handshake preamble")
        rpub, rnonce, tag = reply[3:67], reply[67:99], reply[99:]
        if rpub != remote_pub or not hmac.compare_digest(tag, _lb_tag(own + remote_pub, rnonce + nonce)):
            raise SecureHandshakeFailed("responder failed key authentication")
        return cls(reader, writer, _lb_secrets(nonce, rnonce, own, rpub, True), rpub)

    @classmethod
    async def accept(cls, reader, writer, key: bytes,
                     rng: Optional[random.Random] = None) -> "LoopbackChannel":
        own = crypto.private_to_public(key)
        hello = await _read(reader, _LB_HELLO)
        if hello[:3] != _LB_MAGIC:
            raise SecureHandshakeFailed("unexpected handshake preamble")
        ipub, inonce, tag = hello[3:67], hello[67:99], hello[99:]
        if not hmac.compare_digest(tag, _lb_tag(own + ipub, inonce)):
            raise SecureHandshakeFailed("initiator addressed a different static key")
        nonce = _nonce(rng)
        writer.write(_LB_MAGIC + own + nonce + _lb_tag(ipub + own, nonce + inonce))
        return cls(reader, writer, _lb_secrets(inonce, nonce, ipub, own, False), ipub)

    def _tag(self, key: bytes, seq: int, data: bytes) -> bytes:
        return hmac.new(key, seq.to_bytes(8, "big") + data, hashlib.sha256).digest()[:16]

    async def send(self, payload: bytes) -> None:
        framed = len(payload).to_bytes(4, "big") + payload
        self._write(framed + self._tag(self.secrets.egress_seed, self._out_seq, framed))
        self._out_seq += 1

    async def recv(self) -> bytes:
        head = await _read(self.reader, 4)
        size = int.from_bytes(head, "big")
        if size > MAX_FRAME:
            raise FrameMacError("frame length out of range")
        rest = await _read(self.reader, size + 16)
        payload, tag = rest[:size], rest[size:]
        if not hmac.compare_digest(tag, self._tag(self.secrets.ingress_seed, self._in_seq, head + payload)):
            raise FrameMacError("frame MAC mismatch")
        self._in_seq += 1
        return payload


def _lb_secrets(inonce: bytes, rnonce: bytes, ipub: bytes, rpub: bytes, initiator: bool) -> Secrets:
    shared = crypto.keccak256(inonce + rnonce + ipub + rpub)
    i2r = crypto.keccak256(shared + b"i2r")
    r2i = crypto.keccak256(shared + b"r2i")
    mac = crypto.keccak256(shared + b"mac")
    if initiator:
        return Secrets(shared, mac, i2r, r2i)
    return Secrets(shared, mac, r2i, i2r)


CHANNELS = {"rlpx": RLPxChannel, "loopback": LoopbackChannel}
