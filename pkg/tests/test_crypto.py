import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from devp2p_observatory import crypto

keys = st.integers(1, oracles.SECP256K1_N - 1).map(lambda d: d.to_bytes(32, "big"))
digests = st.binary(min_size=32, max_size=32)


@settings(max_examples=60, deadline=None)
@given(keys)
def test_public_key_matches_openssl(key):
    assert crypto.private_to_public(key) == oracles.public_key(key)


@settings(max_examples=60, deadline=None)
@given(keys, digests)
def test_signature_verifies_under_openssl_and_recovers(key, digest):
    sig = crypto.sign(digest, key)
    assert len(sig) == 65 and sig[64] in (0, 1)
    pub = oracles.public_key(key)
    assert oracles.verify(digest, sig, pub)
    assert crypto.recover(digest, sig) == pub
    assert crypto.verify(digest, sig[:64], pub)


def test_signatures_are_low_s_and_deterministic():
    key = crypto.generate_private_key(random.Random(1))
    for i in range(50):
        h = oracles.keccak(bytes([i]))
        sig = crypto.sign(h, key)
        assert int.from_bytes(sig[32:64], "big") <= oracles.SECP256K1_N // 2
        assert sig == crypto.sign(h, key)


@settings(max_examples=30, deadline=None)
@given(keys, keys)
def test_ecdh_matches_openssl(a, b):
    assert crypto.ecdh(a, oracles.public_key(b)) == oracles.ecdh_x(a, oracles.public_key(b))
    assert crypto.ecdh(a, crypto.private_to_public(b)) == crypto.ecdh(b, crypto.private_to_public(a))


@pytest.mark.parametrize("bad", [b"\x00" * 32, oracles.SECP256K1_N.to_bytes(32, "big"), b"\x01" * 31])
def test_invalid_scalars(bad):
    with pytest.raises(crypto.InvalidScalar):
        crypto.private_to_public(bad)


def test_invalid_point_rejected():
    with pytest.raises(crypto.InvalidPoint):
        crypto.decode_public(b"\x01" * 64)


def test_compression_round_trip():
    r = random.Random(3)
    for _ in range(40):
        pub = crypto.private_to_public(crypto.generate_private_key(r))
        c = crypto.compress_public(pub)
        assert len(c) == 33 and c[0] in (2, 3)
        assert crypto.decompress_public(c) == pub


def test_recover_rejects_garbage():
    with pytest.raises(crypto.CryptoError):
        crypto.recover(b"\x11" * 32, b"\x00" * 65)
    with pytest.raises(crypto.CryptoError):
        crypto.recover(b"\x11" * 32, b"\x01" * 64 + b"\x07")


def test_wrong_key_does_not_verify():
    r = random.Random(4)
    a, b = crypto.generate_private_key(r), crypto.generate_private_key(r)
    h = oracles.keccak(b"msg")
    assert not crypto.verify(h, crypto.sign(h, a)[:64], crypto.private_to_public(b))


@given(st.binary(max_size=600))
def test_keccak_matches_pycryptodome(data):
    assert crypto.keccak256(data) == oracles.keccak(data)


@given(st.lists(st.binary(max_size=200), max_size=6))
def test_streaming_keccak_matches_one_shot(chunks):
    h = crypto.Keccak256()
    for i, c in enumerate(chunks):
        h.update(c)
        snap = h.copy()
        assert snap.digest() == oracles.keccak(b"".join(chunks[:i + 1]))
    assert h.digest() == oracles.keccak(b"".join(chunks))


def test_ecies_round_trip_and_tamper():
    r = random.Random(5)
    key = crypto.generate_private_key(r)
    pub = crypto.private_to_public(key)
    msg = b"hello over ecies" * 5
    ct = crypto.ecies_encrypt(pub, msg, b"mac-data", rng=r)
    assert crypto.ecies_decrypt(key, ct, b"mac-data") == msg
    tampered = ct[:-1] + bytes([ct[-1] ^ 1])
    with pytest.raises(crypto.CryptoError):
        crypto.ecies_decrypt(key, tampered, b"mac-data")
