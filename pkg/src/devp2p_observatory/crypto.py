"""secp256k1, Keccak-256 and ECIES primitives used by discovery and RLPx.

The curve arithmetic is plain Python over Jacobian coordinates with a
fixed-base comb for the generator, which keeps signing and recovery in the
low-millisecond range. Signatures are deterministic (RFC 6979) so simulated
runs are reproducible byte for byte.
"""
from __future__ import annotations

import hashlib
import hmac
import os
from functools import lru_cache
from typing import Optional, Tuple

from Crypto.Cipher import AES
from Crypto.Hash import keccak as _keccak

P = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEFFFFFC2F
N = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
GX = 0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798
GY = 0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8

Point = Tuple[int, int]
_Jac = Tuple[int, int, int]


class CryptoError(Exception):
    pass


class InvalidScalar(CryptoError):
    """Private key is zero or not below the group order."""


class InvalidSignature(CryptoError):
    pass


class InvalidPoint(CryptoError):
    pass


def keccak256(data: bytes) -> bytes:
    return _keccak.new(digest_bits=256, data=data).digest()


# -- curve arithmetic -------------------------------------------------------

_INF: _Jac = (0, 1, 0)


def _jdouble(pt: _Jac) -> _Jac:
    x, y, z = pt
    if not y or not z:
        return _INF
    yy = y * y % P
    s = 4 * x * yy % P
    m = 3 * x * x % P
    x3 = (m * m - 2 * s) % P
    y3 = (m * (s - x3) - 8 * yy * yy) % P
    z3 = 2 * y * z % P
    return x3, y3, z3


def _jadd(a: _Jac, b: _Jac) -> _Jac:
    x1, y1, z1 = a
    x2, y2, z2 = b
    if not z1:
        return b
    if not z2:
        return a
    z1z1 = z1 * z1 % P
    z2z2 = z2 * z2 % P
    u1 = x1 * z2z2 % P
    u2 = x2 * z1z1 % P
    s1 = y1 * z2 * z2z2 % P
    s2 = y2 * z1 * z1z1 % P
    h = (u2 - u1) % P
    r = (s2 - s1) % P
    if not h:
        return _jdouble(a) if not r else _INF
    hh = h * h % P
    hhh = h * hh % P
    v = u1 * hh % P
    x3 = (r * r - hhh - 2 * v) % P
    y3 = (r * (v - x3) - s1 * hhh) % P
    z3 = z1 * z2 * h % P
    return x3, y3, z3


def _jadd_affine(a: _Jac, x2: int, y2: int) -> _Jac:
    x1, y1, z1 = a
    if not z1:
        return x2, y2, 1
    z1z1 = z1 * z1 % P
    u2 = x2 * z1z1 % P
    s2 = y2 * z1 * z1z1 % P
    h = (u2 - x1) % P
    r = (s2 - y1) % P
    if not h:
        return _jdouble(a) if not r else _INF
    hh = h * h % P
    hhh = h * hh % P
    v = x1 * hh % P
    x3 = (r * r - hhh - 2 * v) % P
    y3 = (r * (v - x3) - y1 * hhh) % P
    z3 = z1 * h % P
    return x3, y3, z3


def _to_affine(pt: _Jac) -> Optional[Point]:
    x, y, z = pt
    if not z:
        return None
    zi = pow(z, -1, P)
    zi2 = zi * zi % P
    return x * zi2 % P, y * zi2 * zi % P


_COMB_BITS = 8
_COMB_WINDOWS = 256 // _COMB_BITS


def _batch_affine(points: list) -> list:
    """Jacobian to affine with one field inversion (Montgomery's trick)."""
    zs = [pt[2] for pt in points]
    prefix = [1]
    for z in zs:
        prefix.append(prefix[-1] * z % P)
    inv = pow(prefix[-1], -1, P)
    out = [None] * len(points)
    for i in range(len(points) - 1, -1, -1):
        zi = inv * prefix[i] % P
        inv = inv * zs[i] % P
        zi2 = zi * zi % P
        x, y, _ = points[i]
        out[i] = (x * zi2 % P, y * zi2 * zi % P)
    return out


@lru_cache(maxsize=1)
def _comb_table() -> list:
    # table[i][j] = (j+1) * 256**i * G, affine
    table = []
    base: _Jac = (GX, GY, 1)
    for _ in range(_COMB_WINDOWS):
        row = [base]
        for _ in range((1 << _COMB_BITS) - 2):
            row.append(_jadd(row[-1], base))
        table.append(_batch_affine(row))
        for _ in range(_COMB_BITS):
            base = _jdouble(base)
    return table


def _mul_g(k: int) -> _Jac:
    table = _comb_table()
    acc = _INF
    mask = (1 << _COMB_BITS) - 1
    for i in range(_COMB_WINDOWS):
        digit = (k >> (i * _COMB_BITS)) & mask
        if digit:
            x, y = table[i][digit - 1]
            acc = _jadd_affine(acc, x, y)
    return acc


def _wnaf(k: int, w: int = 5) -> list:
    digits = []
    half = 1 << (w - 1)
    full = 1 << w
    while k:
        if k & 1:
            d = k % full
            if d >= half:
                d -= full
            k -= d
        else:
            d = 0
        digits.append(d)
        k >>= 1
    return digits


# GLV endomorphism: lambda * (x, y) == (beta * x, y); splits k into two ~128-bit halves
_LAMBDA = 0x5363AD4CC05C30E0A5261C028812645A122E22EA20816678DF02967C1B23BD72
_BETA = 0x7AE96A2B657C07106E64479EAC3434E99CF0497512F58995C1396C28719501EE
_A1 = 0x3086D221A7D46BCDE86C90E49284EB15
_B1 = -0xE4437ED6010E88286F547FA90ABFE4C3
_A2 = 0x114CA50F7A8E2F3F657C1108D9D44CFD8
_B2 = _A1


def _split(k: int) -> Tuple[int, int]:
    c1 = (_B2 * k + N // 2) // N
    c2 = (-_B1 * k + N // 2) // N
    return k - c1 * _A1 - c2 * _A2, -c1 * _B1 - c2 * _B2


def _odd_multiples(pt: Point, count: int = 8) -> list:
    base: _Jac = (pt[0], pt[1], 1)
    twice = _jdouble(base)
    odd = [base]
    for _ in range(count - 1):
        odd.append(_jadd(odd[-1], twice))
    return _batch_affine(odd)


def _mul(pt: Point, k: int) -> _Jac:
    """k * pt via the endomorphism and a joint wNAF ladder."""
    k %= N
    if not k:
        return _INF
    k1, k2 = _split(k)
    odd1 = _odd_multiples(pt)
    odd2 = [(_BETA * x % P, y) for x, y in odd1]
    if k1 < 0:
        k1, odd1 = -k1, [(x, P - y) for x, y in odd1]
    if k2 < 0:
        k2, odd2 = -k2, [(x, P - y) for x, y in odd2]
    n1, n2 = _wnaf(k1), _wnaf(k2)
    length = max(len(n1), len(n2))
    n1 += [0] * (length - len(n1))
    n2 += [0] * (length - len(n2))
    acc = _INF
    for i in range(length - 1, -1, -1):
        acc = _jdouble(acc)
        for d, odd in ((n1[i], odd1), (n2[i], odd2)):
            if d > 0:
                x, y = odd[d >> 1]
                acc = _jadd_affine(acc, x, y)
            elif d < 0:
                x, y = odd[(-d) >> 1]
                acc = _jadd_affine(acc, x, P - y)
    return acc


def is_on_curve(pt: Point) -> bool:
    x, y = pt
    return 0 <= x < P and 0 <= y < P and (y * y - x * x * x - 7) % P == 0


# -- keys -------------------------------------------------------------------


def check_scalar(key: bytes) -> int:
    if len(key) != 32:
        raise InvalidScalar(f"private key must be 32 bytes, got {len(key)}")
    d = int.from_bytes(key, "big")
    if not 0 < d < N:
        raise InvalidScalar("private key must be in [1, n-1]")
    return d


@lru_cache(maxsize=16384)
def private_to_public(key: bytes) -> bytes:
    """64-byte uncompressed public key (no 0x04 prefix)."""
    d = check_scalar(bytes(key))
    x, y = _to_affine(_mul_g(d))
    return x.to_bytes(32, "big") + y.to_bytes(32, "big")


def generate_private_key(rng=None) -> bytes:
    while True:
        raw = rng.randbytes(32) if rng is not None else os.urandom(32)
        if 0 < int.from_bytes(raw, "big") < N:
            return raw


def decode_public(pub: bytes) -> Point:
    if len(pub) == 65 and pub[0] == 4:
        pub = pub[1:]
    if len(pub) == 64:
        pt = int.from_bytes(pub[:32], "big"), int.from_bytes(pub[32:], "big")
        if not is_on_curve(pt):
            raise InvalidPoint("public key is not on secp256k1")
        return pt
    if len(pub) == 33 and pub[0] in (2, 3):
        x = int.from_bytes(pub[1:], "big")
        y = _lift_x(x, pub[0] & 1)
        return x, y
    raise InvalidPoint(f"bad public key length {len(pub)}")


def _lift_x(x: int, parity: int) -> int:
    if x >= P:
        raise InvalidPoint("x out of range")
    y2 = (pow(x, 3, P) + 7) % P
    y = pow(y2, (P + 1) // 4, P)
    if y * y % P != y2:
        raise InvalidPoint("x is not on the curve")
    if y & 1 != parity:
        y = P - y
    return y


def compress_public(pub: bytes) -> bytes:
    x, y = decode_public(pub)
    return bytes([2 | (y & 1)]) + x.to_bytes(32, "big")


def decompress_public(pub: bytes) -> bytes:
    x, y = decode_public(pub)
    return x.to_bytes(32, "big") + y.to_bytes(32, "big")


# -- ECDSA ------------------------------------------------------------------


def _rfc6979_k(d: int, h: bytes) -> int:
    x = d.to_bytes(32, "big")
    hv = (int.from_bytes(h, "big") % N).to_bytes(32, "big")
    v = b"\x01" * 32
    k = b"\x00" * 32
    k = hmac.new(k, v + b"\x00" + x + hv, hashlib.sha256).digest()
    v = hmac.new(k, v, hashlib.sha256).digest()
    k = hmac.new(k, v + b"\x01" + x + hv, hashlib.sha256).digest()
    v = hmac.new(k, v, hashlib.sha256).digest()
    while True:
        v = hmac.new(k, v, hashlib.sha256).digest()
        cand = int.from_bytes(v, "big")
        if 0 < cand < N:
            return cand
        k = hmac.new(k, v + b"\x00", hashlib.sha256).digest()
        v = hmac.new(k, v, hashlib.sha256).digest()


def sign(msg_hash: bytes, key: bytes) -> bytes:
    """65-byte recoverable signature r || s || v over a 32-byte digest."""
    if len(msg_hash) != 32:
        raise ValueError("message hash must be 32 bytes")
    d = check_scalar(key)
    z = int.from_bytes(msg_hash, "big")
    while True:
        k = _rfc6979_k(d, msg_hash)
        rx, ry = _to_affine(_mul_g(k))
        r = rx % N
        if not r:
            continue
        s = pow(k, -1, N) * (z + r * d) % N
        if not s:
            continue
        v = (ry & 1) | (2 if rx >= N else 0)
        if s > N // 2:
            s = N - s
            v ^= 1
        return r.to_bytes(32, "big") + s.to_bytes(32, "big") + bytes([v])


@lru_cache(maxsize=65536)
def recover(msg_hash: bytes, signature: bytes) -> bytes:
    """Recover the 64-byte public key that produced ``signature``."""
    if len(signature) != 65 or len(msg_hash) != 32:
        raise InvalidSignature("signature must be 65 bytes over a 32-byte hash")
    r = int.from_bytes(signature[:32], "big")
    s = int.from_bytes(signature[32:64], "big")
    v = signature[64]
    if v > 3 or not 0 < r < N or not 0 < s < N:
        raise InvalidSignature("signature values out of range")
    x = r + N if v & 2 else r
    try:
        y = _lift_x(x, v & 1)
    except InvalidPoint as exc:
        raise InvalidSignature(str(exc)) from None
    z = int.from_bytes(msg_hash, "big")
    rinv = pow(r, -1, N)
    u1 = (-z * rinv) % N
    u2 = s * rinv % N
    q = _to_affine(_jadd(_mul_g(u1), _mul((x, y), u2)))
    if q is None:
        raise InvalidSignature("recovered point at infinity")
    return q[0].to_bytes(32, "big") + q[1].to_bytes(32, "big")


def verify(msg_hash: bytes, signature: bytes, pub: bytes) -> bool:
    """Check a 64-byte r || s signature against a known public key."""
    if len(signature) < 64:
        return False
    r = int.from_bytes(signature[:32], "big")
    s = int.from_bytes(signature[32:64], "big")
    if not 0 < r < N or not 0 < s < N:
        return False
    try:
        q = decode_public(pub)
    except InvalidPoint:
        return False
    sinv = pow(s, -1, N)
    z = int.from_bytes(msg_hash, "big")
    pt = _to_affine(_jadd(_mul_g(z * sinv % N), _mul(q, r * sinv % N)))
    return pt is not None and pt[0] % N == r


def ecdh(key: bytes, pub: bytes) -> bytes:
    """Shared secret: x coordinate of key * pub."""
    d = check_scalar(key)
    pt = _to_affine(_mul(decode_public(pub), d))
    if pt is None:
        raise InvalidPoint("shared point at infinity")
    return pt[0].to_bytes(32, "big")


# -- streaming keccak (RLPx MAC state needs digests of a running hash) ------

_RC = [
    0x0000000000000001, 0x0000000000008082, 0x800000000000808A, 0x8000000080008000,
    0x000000000000808B, 0x0000000080000001, 0x8000000080008081, 0x8000000000008009,
    0x000000000000008A, 0x0000000000000088, 0x0000000080008009, 0x000000008000000A,
    0x000000008000808B, 0x800000000000008B, 0x8000000000008089, 0x8000000000008003,
    0x8000000000008002, 0x8000000000000080, 0x000000000000800A, 0x800000008000000A,
    0x8000000080008081, 0x8000000000008080, 0x0000000080000001, 0x8000000080008008,
]
_ROT = [
    [0, 36, 3, 41, 18], [1, 44, 10, 45, 2], [62, 6, 43, 15, 61],
    [28, 55, 25, 21, 56], [27, 20, 39, 8, 14],
]
_M64 = (1 << 64) - 1


def _rol(v: int, n: int) -> int:
    return ((v << n) | (v >> (64 - n))) & _M64 if n else v


def _keccak_f(a: list) -> None:
    for rc in _RC:
        c = [a[x] ^ a[x + 5] ^ a[x + 10] ^ a[x + 15] ^ a[x + 20] for x in range(5)]
        d = [c[(x - 1) % 5] ^ _rol(c[(x + 1) % 5], 1) for x in range(5)]
        for i in range(25):
            a[i] ^= d[i % 5]
        b = [0] * 25
        for x in range(5):
            for y in range(5):
                b[y + 5 * ((2 * x + 3 * y) % 5)] = _rol(a[x + 5 * y], _ROT[x][y])
        for y in range(0, 25, 5):
            row = b[y:y + 5]
            for x in range(5):
                a[y + x] = row[x] ^ (~row[(x + 1) % 5] & row[(x + 2) % 5])
        a[0] ^= rc


class Keccak256:
    """Keccak-256 whose ``digest()`` does not finalize the running state."""

    rate = 136

    def __init__(self, data: bytes = b"") -> None:
        self._state = [0] * 25
        self._buf = b""
        if data:
            self.update(data)

    def update(self, data: bytes) -> "Keccak256":
        buf = self._buf + data
        while len(buf) >= self.rate:
            self._absorb(buf[: self.rate])
            buf = buf[self.rate:]
        self._buf = buf
        return self

    def _absorb(self, block: bytes) -> None:
        for i in range(self.rate // 8):
            self._state[i] ^= int.from_bytes(block[8 * i: 8 * i + 8], "little")
        _keccak_f(self._state)

    def copy(self) -> "Keccak256":
        other = Keccak256()
        other._state = list(self._state)
        other._buf = self._buf
        return other

    def digest(self) -> bytes:
        tmp = self.copy()
        pad = bytearray(self.rate - len(tmp._buf))
        pad[0] |= 0x01
        pad[-1] |= 0x80
        tmp._absorb(tmp._buf + bytes(pad))
        return b"".join(v.to_bytes(8, "little") for v in tmp._state[:4])


# -- ECIES (RLPx handshake envelope) ------------------------------------------


def _concat_kdf(secret: bytes, length: int) -> bytes:
    out = b""
    counter = 1
    while len(out) < length:
        out += hashlib.sha256(counter.to_bytes(4, "big") + secret).digest()
        counter += 1
    return out[:length]


def ecies_encrypt(pub: bytes, plaintext: bytes, shared_mac_data: bytes = b"",
                  rng=None) -> bytes:
    eph = generate_private_key(rng)
    shared = ecdh(eph, pub)
    key = _concat_kdf(shared, 32)
    ke, km = key[:16], hashlib.sha256(key[16:]).digest()
    iv = rng.randbytes(16) if rng is not None else os.urandom(16)
    ct = AES.new(ke, AES.MODE_CTR, initial_value=iv, nonce=b"").encrypt(plaintext)
    tag = hmac.new(km, iv + ct + shared_mac_data, hashlib.sha256).digest()
    return b"\x04" + private_to_public(eph) + iv + ct + tag


def ecies_decrypt(key: bytes, message: bytes, shared_mac_data: bytes = b"") -> bytes:
    if len(message) < 65 + 16 + 32 or message[0] != 4:
        raise CryptoError("ECIES message too short or malformed")
    eph_pub = message[1:65]
    iv = message[65:81]
    ct = message[81:-32]
    tag = message[-32:]
    try:
        shared = ecdh(key, eph_pub)
    except InvalidPoint as exc:
        raise CryptoError(str(exc)) from None
    k = _concat_kdf(shared, 32)
    ke, km = k[:16], hashlib.sha256(k[16:]).digest()
    expect = hmac.new(km, iv + ct + shared_mac_data, hashlib.sha256).digest()
    if not hmac.compare_digest(expect, tag):
        raise CryptoError("ECIES MAC mismatch")
    return AES.new(ke, AES.MODE_CTR, initial_value=iv, nonce=b"").decrypt(ct)
