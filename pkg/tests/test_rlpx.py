import asyncio
import random

import pytest

from devp2p_observatory import crypto
from devp2p_observatory.clock import run_virtual
from devp2p_observatory.rlpx import (FrameMacError, LoopbackChannel, RLPxChannel, SecureHandshakeFailed,
                                     TransportClosed)
from devp2p_observatory.simnet.fabric import Fabric

R = random.Random(11)
A_KEY, B_KEY, C_KEY = (crypto.generate_private_key(R) for _ in range(3))


async def pair(cls, dial_pub=None, tamper=None):
    fabric = Fabric(asyncio.get_running_loop())
    accepted = asyncio.get_running_loop().create_future()

    async def on_accept(reader, writer, remote):
        try:
            accepted.set_result(await cls.accept(reader, writer, B_KEY, random.Random(2)))
        except Exception as exc:
            writer.close()  # what accept_session does on a failed handshake
            accepted.set_exception(exc)

    fabric.listen_tcp(("192.0.2.2", 30303), on_accept)
    reader, writer = await fabric.open_connection("192.0.2.1", "192.0.2.2", 30303)
    if tamper:
        writer = tamper(writer)
    init = await cls.initiate(reader, writer, A_KEY, dial_pub or crypto.private_to_public(B_KEY),
                              random.Random(1))
    return init, await accepted


@pytest.mark.parametrize("cls", [RLPxChannel, LoopbackChannel])
def test_handshake_and_frames(cls):
    async def main():
        a, b = await pair(cls)
        assert a.remote_id == crypto.private_to_public(B_KEY)
        assert b.remote_id == crypto.private_to_public(A_KEY)
        assert a.secrets.egress_seed == b.secrets.ingress_seed
        msgs = [b"", b"x", b"y" * 15, b"z" * 16, b"w" * 5000]
        for m in msgs:
            await a.send(m)
        got = [await b.recv() for _ in msgs]
        await b.send(b"reply")
        return got, await a.recv()

    got, reply = run_virtual(main)
    assert got == [b"", b"x", b"y" * 15, b"z" * 16, b"w" * 5000] and reply == b"reply"


def test_rlpx_secrets_symmetric():
    async def main():
        a, b = await pair(RLPxChannel)
        return a.secrets, b.secrets

    sa, sb = run_virtual(main)
    assert sa.aes == sb.aes and sa.mac == sb.mac
    assert sa.ingress_seed == sb.egress_seed


@pytest.mark.parametrize("cls", [RLPxChannel, LoopbackChannel])
def test_wrong_remote_key_fails_handshake(cls):
    async def main():
        with pytest.raises((SecureHandshakeFailed, TransportClosed)):
            await asyncio.wait_for(pair(cls, dial_pub=crypto.private_to_public(C_KEY)), 5)
        await asyncio.sleep(0.1)

    run_virtual(main)


class _Flip:
    """Writer wrapper that flips one byte of the n-th write."""

    def __init__(self, writer, nth):
        self.w, self.nth, self.count = writer, nth, 0

    def write(self, data):
        self.count += 1
        if self.count == self.nth:
            data = data[:-1] + bytes([data[-1] ^ 1])
        self.w.write(data)

    def __getattr__(self, name):
        return getattr(self.w, name)


@pytest.mark.parametrize("cls", [RLPxChannel, LoopbackChannel])
def test_tampered_frame_detected(cls):
    async def main():
        a, b = await pair(cls, tamper=lambda w: _Flip(w, 2))
        await a.send(b"payload")
        with pytest.raises(FrameMacError):
            await b.recv()

    run_virtual(main)


def test_closed_stream_reports_transport_closed():
    async def main():
        a, b = await pair(LoopbackChannel)
        a.close()
        with pytest.raises(TransportClosed):
            await b.recv()
        with pytest.raises(TransportClosed):
            await a.send(b"late")

    run_virtual(main)
