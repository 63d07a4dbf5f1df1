import random

import pytest

import oracles
from devp2p_observatory import codec, crypto, rlp
from devp2p_observatory.codec import (Disconnect, ENRRequest, ENRResponse, Endpoint, FindNode, ForkId, Hello,
                                      NeighborNode, Neighbors, NodeRecord, Ping, Pong, Status)

KEY = crypto.generate_private_key(random.Random(7))
EP = Endpoint("203.0.113.9", 30303, 30304)


def node(i, ip="203.0.113.9"):
    return NeighborNode(Endpoint(ip, 30303, 30303), random.Random(i).randbytes(64))


def test_packet_layout():
    data = codec.encode_packet(FindNode(b"\x01" * 64, 1700000000), KEY)
    assert data[:32] == oracles.keccak(data[32:])
    payload = data[97:]
    assert payload[0] == 3
    assert oracles.verify(oracles.keccak(payload), data[32:97], oracles.public_key(KEY))
    pkt = codec.decode_packet(data)
    assert pkt.kind == "FindNode" and pkt.size == len(data) and pkt.packet_hash == data[:32]


def test_ping_without_enr_seq_and_extra_fields():
    ping = Ping(EP, Endpoint("2001:db8::5", 1, 2), 99)
    assert codec.decode_packet(codec.encode_packet(ping, KEY)).body == ping
    # newer versions may append list elements; decoding ignores them
    payload = bytes([1]) + rlp.encode(ping.to_rlp() + [5, b"future"])
    sig = crypto.sign(crypto.keccak256(payload), KEY)
    data = crypto.keccak256(sig + payload) + sig + payload
    assert codec.decode_packet(data).body.enr_seq == 5


def test_truncated():
    with pytest.raises(codec.TruncatedPacket):
        codec.decode_packet(b"\x00" * 97)


def test_flipped_hash_and_signature_bytes():
    data = bytearray(codec.encode_packet(ENRRequest(5), KEY))
    bad_hash = bytes([data[0] ^ 1]) + bytes(data[1:])
    with pytest.raises(codec.BadHash):
        codec.decode_packet(bad_hash)
    data[40] ^= 1
    with pytest.raises(codec.BadSignature):
        codec.decode_packet(bytes(data))


def test_unknown_packet_type():
    payload = b"\x09" + rlp.encode([1])
    sig = crypto.sign(crypto.keccak256(payload), KEY)
    with pytest.raises(codec.UnknownPacketType):
        codec.decode_packet(crypto.keccak256(sig + payload) + sig + payload)


def test_invalid_body():
    payload = b"\x03" + rlp.encode([b"\x01" * 10, 5])  # target must be 64 bytes
    sig = crypto.sign(crypto.keccak256(payload), KEY)
    with pytest.raises(codec.InvalidBody):
        codec.decode_packet(crypto.keccak256(sig + payload) + sig + payload)


def test_neighbors_size_arithmetic():
    exp = 2 ** 32 - 1
    assert codec.encoded_size(Neighbors(tuple(node(i) for i in range(14)), exp)) <= 1280
    assert codec.encoded_size(Neighbors(tuple(node(i) for i in range(15)), exp)) > 1280
    v6 = tuple(node(i, "2001:db8::1") for i in range(13))
    assert codec.encoded_size(Neighbors(v6[:12], exp)) <= 1280
    with pytest.raises(codec.OversizePacket):
        codec.encode_packet(Neighbors(v6, exp), KEY)


def test_more_than_sixteen_refused():
    with pytest.raises(codec.InvalidBody):
        codec.encode_packet(Neighbors(tuple(node(i) for i in range(17)), 1), KEY)


def test_split_neighbors_twelve_plus_four():
    parts = codec.split_neighbors([node(i) for i in range(16)], 1700000000)
    assert [len(p.nodes) for p in parts] == [12, 4]
    assert codec.max_neighbors_per_packet() == 12
    for p in parts:
        assert len(codec.encode_packet(p, KEY)) <= 1280
    assert [len(p.nodes) for p in codec.split_neighbors([], 1)] == [0]


def test_node_record_round_trip_and_verify():
    rec = NodeRecord.create(KEY, 3, EP, {b"eth": [[b"\x9f\x3d\x22\x54", b""]]})
    assert rec.verify()
    assert rec.identity.node_id == crypto.private_to_public(KEY)
    assert rec.endpoint == EP
    back = NodeRecord.from_rlp(rlp.decode(rlp.encode(rec.to_rlp())))
    assert back == rec and back.verify()
    forged = NodeRecord(4, rec.signature, rec.pairs)
    assert not forged.verify()


def test_record_rules():
    rec = NodeRecord.create(KEY, 1, EP)
    items = rec.to_rlp()
    unsorted = items[:2] + items[4:6] + items[2:4] + items[6:]
    with pytest.raises(codec.InvalidBody):
        NodeRecord.from_rlp(unsorted)
    with pytest.raises(codec.InvalidBody):
        NodeRecord.from_rlp(items + [b"zz", b"x" * 300])


def test_enr_response_round_trip():
    body = ENRResponse(b"\x22" * 32, NodeRecord.create(KEY, 9, Endpoint("2001:db8::7", 1, 2)))
    got = codec.decode_packet(codec.encode_packet(body, KEY)).body
    assert got == body and got.record.endpoint.ip == "2001:db8::7"


def test_pong_round_trip():
    body = Pong(EP, b"\x33" * 32, 77, 4)
    assert codec.decode_packet(codec.encode_packet(body, KEY)).body == body


def test_capability_messages():
    hello = Hello("Geth/v1.13.14", (("eth", 68), ("snap", 1)), 30303, b"\x01" * 64)
    data = codec.encode_capability_message(hello)
    assert codec.message_code(data) == codec.HELLO
    assert codec.decode_capability_message(data) == hello
    st = Status(68, 1, b"\x02" * 32, ForkId(bytes.fromhex("9f3d2254"), 0), b"\x03" * 32, 17)
    data = codec.encode_capability_message(st, eth_offset=16)
    assert data[0] == 16
    assert codec.decode_capability_message(data) == st
    assert codec.decode_capability_message(codec.encode_capability_message(Disconnect(4))).reason == 4


def test_bare_disconnect_reason_accepted():
    assert codec.decode_capability_message(b"\x01" + rlp.encode(b"\x03")).reason == 3
    assert codec.decode_capability_message(b"\x01").reason == 0


def test_duplicate_capability_is_malformed():
    body = [5, b"x", [[b"eth", 68], [b"eth", 68]], 1, b"\x01" * 64]
    with pytest.raises(codec.MalformedMessage):
        codec.decode_capability_message(b"\x80" + rlp.encode(body))


@pytest.mark.parametrize("body,where", [
    ([68, 1, 0, b"\x01" * 32, b"\x02" * 32], "Status[5]"),
    ([68, 1, 0, b"\x01" * 31, b"\x02" * 32, [b"\x01" * 4, 0]], "Status[3]"),
    ([68, b"\x00\x01", 0, b"\x01" * 32, b"\x02" * 32, [b"\x01" * 4, 0]], "Status[1]"),
])
def test_malformed_status_names_field(body, where):
    with pytest.raises(codec.MalformedMessage) as err:
        codec.decode_capability_message(b"\x10" + rlp.encode(body))
    assert err.value.position == where


def test_unknown_message_code():
    with pytest.raises(codec.MalformedMessage):
        codec.decode_capability_message(b"\x2a" + rlp.encode([]))


def test_reason_names():
    assert codec.reason_name(3) == "Useless peer"
    assert codec.reason_name(0x10) == "Subprotocol reason"
    assert codec.reason_name(0x42) == "unknown(66)"


def test_fork_id_text():
    fid = ForkId.parse("9f3d2254/0")
    assert fid.fork_hash.hex() == "9f3d2254" and fid.fork_next == 0 and str(fid) == "9f3d2254/0"
    with pytest.raises(ValueError):
        ForkId(b"\x01")


def test_endpoint_validation():
    with pytest.raises(ValueError):
        Endpoint("203.0.113.1", 70000, 1)
    with pytest.raises(ValueError):
        Endpoint("not-an-ip", 1, 1)
    assert Endpoint("2001:0db8::0001", 1, 1).ip == "2001:db8::1"


def test_describe_is_json_friendly():
    import json
    pkt = codec.decode_packet(codec.encode_packet(Neighbors((node(1),), 5), KEY))
    view = codec.describe(pkt)
    json.dumps(view)
    assert view["kind"] == "Neighbors" and view["body"]["nodes"][0]["endpoint"]["udp"] == 30303
    assert codec.describe(Disconnect(3))["reason_name"] == "Useless peer"
