"""Tests for core/transport.py: in-process and loopback socket channels, round guard."""
from __future__ import annotations

import numpy as np
import pytest

from core.errors import ProtocolError, TransportError
from core.transport import InProcessTransport, RoundGuard, SocketTransport, make_transport
from core.wire import ProtoDown, ReprUp, decode_message, encode_message


def _frames():
    down = encode_message(ProtoDown(1, np.eye(2), np.array([0.5, 0.5])))
    up = encode_message(ReprUp(1, 2, np.ones((3, 2)), np.array([0.5, 0.5])))
    return down, up


@pytest.mark.parametrize("kind", ["inproc", "socket"])
class TestChannels:
    async def test_frames_arrive_byte_exact(self, kind):
        down, up = _frames()
        async with make_transport(kind, timeout=5.0) as transport:
            await transport.open([1, 2])
            await transport.send_down(2, down)
            assert await transport.recv_down(2) == down
            await transport.send_up(2, up)
            assert await transport.recv_up(2) == up

    async def test_back_to_back_frames_keep_boundaries(self, kind):
        down, _ = _frames()
        other = encode_message(ProtoDown(2, np.zeros((2, 2)), np.array([1.0, 0.0])))
        async with make_transport(kind, timeout=5.0) as transport:
            await transport.open([1])
            await transport.send_down(1, down)
            await transport.send_down(1, other)
            first = await transport.recv_down(1)
            second = await transport.recv_down(1)
        assert decode_message(first)[0].round == 1
        assert decode_message(second)[0].round == 2

    async def test_recv_times_out(self, kind):
        async with make_transport(kind, timeout=0.05) as transport:
            await transport.open([1])
            with pytest.raises(TransportError):
                await transport.recv_up(1)

    async def test_unknown_party(self, kind):
        down, _ = _frames()
        async with make_transport(kind, timeout=1.0) as transport:
            await transport.open([1])
            with pytest.raises(TransportError):
                await transport.send_down(5, down)


class TestInProcess:
    async def test_closed_transport_refuses(self):
        transport = InProcessTransport()
        await transport.open([1])
        await transport.close()
        with pytest.raises(TransportError):
            await transport.send_up(1, b"x")

    async def test_parties_are_independent(self):
        down, _ = _frames()
        transport = InProcessTransport(timeout=0.05)
        await transport.open([1, 2])
        await transport.send_down(1, down)
        with pytest.raises(TransportError):
            await transport.recv_down(2)
        assert await transport.recv_down(1) == down


class TestSocket:
    async def test_peer_closing_mid_frame(self):
        down, _ = _frames()
        transport = SocketTransport(timeout=2.0)
        await transport.open([1])
        writer = transport._active_side[1][1]
        writer.write(down[:7])
        await writer.drain()
        writer.close()
        with pytest.raises(TransportError):
            await transport.recv_down(1)
        await transport.close()

    async def test_binds_ephemeral_loopback_port(self):
        transport = SocketTransport()
        await transport.open([1, 2, 3])
        try:
            assert transport.port is not None and transport.port > 0
        finally:
            await transport.close()


class TestRoundGuard:
    def test_nondecreasing_rounds_pass(self):
        guard = RoundGuard()
        for r in (0, 1, 1, 2):
            guard.check(1, "up", r)

    def test_backwards_round_rejected(self):
        guard = RoundGuard()
        guard.check(1, "down", 3)
        with pytest.raises(ProtocolError):
            guard.check(1, "down", 2)

    def test_streams_are_separate(self):
        guard = RoundGuard()
        guard.check(1, "down", 3)
        guard.check(2, "down", 1)
        guard.check(1, "up", 0)


def test_make_transport_rejects_unknown_kind():
    with pytest.raises(ValueError):
        make_transport("carrier-pigeon")  # type: ignore[arg-type]


