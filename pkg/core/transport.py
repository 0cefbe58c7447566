"""Party channels that move encoded frames between the active party and each party.

Both transports carry the exact bytes produced by ``core.wire`` so the comm
log and the learning trajectory do not depend on which one is used.

Directions:
    down  active party -> party m   (ProtoDown)
    up    party m -> active party   (ReprUp)
"""
from __future__ import annotations

import asyncio
import logging
import struct
from abc import ABC, abstractmethod
from typing import Iterable, Literal

from core.errors import ProtocolError, TransportError
from core.wire import FRAME_HEADER_SIZE, peek_frame_length

logger = logging.getLogger(__name__)

TransportKind = Literal["inproc", "socket"]

_HELLO = struct.Struct("<I")
DEFAULT_TIMEOUT = 30.0


class Transport(ABC):
    """One bidirectional channel per party id."""

    def __init__(self, timeout: float = DEFAULT_TIMEOUT) -> None:
        self.timeout = timeout
        self.party_ids: tuple[int, ...] = ()

    @abstractmethod
    async def open(self, party_ids: Iterable[int]) -> None: ...

    @abstractmethod
    async def send_down(self, party_id: int, frame: bytes) -> None: ...

    @abstractmethod
    async def recv_down(self, party_id: int) -> bytes: ...

    @abstractmethod
    async def send_up(self, party_id: int, frame: bytes) -> None: ...

    @abstractmethod
    async def recv_up(self, party_id: int) -> bytes: ...

    @abstractmethod
    async def close(self) -> None: ...

    async def __aenter__(self) -> "Transport":
        return self

    async def __aexit__(self, *exc: object) -> None:
        await self.close()

    async def _with_timeout(self, coro, what: str):
        try:
            return await asyncio.wait_for(coro, timeout=self.timeout)
        except asyncio.TimeoutError as exc:
            raise TransportError(f"timed out waiting for {what}") from exc


# ---------------------------------------------------------------------------
# In-process
# ---------------------------------------------------------------------------

class InProcessTransport(Transport):
    """asyncio.Queue pair per party.  Default for tests and single-host runs."""

    def __init__(self, timeout: float = DEFAULT_TIMEOUT) -> None:
        super().__init__(timeout)
        self._down: dict[int, asyncio.Queue[bytes]] = {}
        self._up: dict[int, asyncio.Queue[bytes]] = {}
        self._closed = False

    async def open(self, party_ids: Iterable[int]) -> None:
        self.party_ids = tuple(sorted(party_ids))
        for m in self.party_ids:
            self._down[m] = asyncio.Queue()
            self._up[m] = asyncio.Queue()
        self._closed = False

    def _queue(self, table: dict[int, asyncio.Queue[bytes]], party_id: int) -> asyncio.Queue[bytes]:
        if self._closed:
            raise TransportError("transport is closed")
        try:
            return table[party_id]
        except KeyError:
            raise TransportError(f"no channel for party {party_id}") from None

    async def send_down(self, party_id: int, frame: bytes) -> None:
        await self._queue(self._down, party_id).put(bytes(frame))

    async def recv_down(self, party_id: int) -> bytes:
        return await self._with_timeout(self._queue(self._down, party_id).get(), f"down frame for party {party_id}")

    async def send_up(self, party_id: int, frame: bytes) -> None:
        await self._queue(self._up, party_id).put(bytes(frame))

    async def recv_up(self, party_id: int) -> bytes:
        return await self._with_timeout(self._queue(self._up, party_id).get(), f"up frame from party {party_id}")

    async def close(self) -> None:
        self._closed = True


# ---------------------------------------------------------------------------
# Socket
# ---------------------------------------------------------------------------

async def read_frame(reader: asyncio.StreamReader) -> bytes:
    """Read exactly one length-prefixed frame."""
    try:
        header = await reader.readexactly(FRAME_HEADER_SIZE)
        body = await reader.readexactly(peek_frame_length(header) - FRAME_HEADER_SIZE)
    except asyncio.IncompleteReadError as exc:
        raise TransportError(f"stream closed mid-frame after {len(exc.partial)} bytes") from exc
    except (ConnectionError, OSError) as exc:
        raise TransportError(str(exc)) from exc
    return header + body


class SocketTransport(Transport):
    """Loopback TCP: the active party listens, every party opens one long-lived stream.

    The first 4 bytes a party sends are its id (u32 LE); after that the
    stream carries wire frames only.
    """

    def __init__(self, host: str = "127.0.0.1", timeout: float = DEFAULT_TIMEOUT) -> None:
        super().__init__(timeout)
        self.host = host
        self.port: int | None = None
        self._server: asyncio.AbstractServer | None = None
        self._active_side: dict[int, tuple[asyncio.StreamReader, asyncio.StreamWriter]] = {}
        self._party_side: dict[int, tuple[asyncio.StreamReader, asyncio.StreamWriter]] = {}
        self._arrived: dict[int, asyncio.Event] = {}

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            (party_id,) = _HELLO.unpack(await reader.readexactly(_HELLO.size))
        except asyncio.IncompleteReadError:
            writer.close()
            return
        if party_id not in self._arrived:
            logger.warning("Rejecting connection from unknown party", extra={"party_id": party_id})
            writer.close()
            return
        self._active_side[party_id] = (reader, writer)
        self._arrived[party_id].set()

    async def open(self, party_ids: Iterable[int]) -> None:
        self.party_ids = tuple(sorted(party_ids))
        self._arrived = {m: asyncio.Event() for m in self.party_ids}
        try:
            self._server = await asyncio.start_server(self._accept, self.host, 0)
            self.port = self._server.sockets[0].getsockname()[1]
            for m in self.party_ids:
                reader, writer = await asyncio.open_connection(self.host, self.port)
                writer.write(_HELLO.pack(m))
                await writer.drain()
                self._party_side[m] = (reader, writer)
            await self._with_timeout(
                asyncio.gather(*(self._arrived[m].wait() for m in self.party_ids)), "party handshakes"
            )
        except OSError as exc:
            raise TransportError(f"socket setup failed: {exc}") from exc
        logger.info("Socket transport open", extra={"port": self.port, "parties": len(self.party_ids)})

    def _side(self, table: dict, party_id: int) -> tuple[asyncio.StreamReader, asyncio.StreamWriter]:
        try:
            return table[party_id]
        except KeyError:
            raise TransportError(f"no stream for party {party_id}") from None

    async def _write(self, writer: asyncio.StreamWriter, frame: bytes) -> None:
        try:
            writer.write(frame)
            await writer.drain()
        except (ConnectionError, OSError) as exc:
            raise TransportError(str(exc)) from exc

    async def send_down(self, party_id: int, frame: bytes) -> None:
        await self._write(self._side(self._active_side, party_id)[1], frame)

    async def recv_down(self, party_id: int) -> bytes:
        reader = self._side(self._party_side, party_id)[0]
        return await self._with_timeout(read_frame(reader), f"down frame for party {party_id}")

    async def send_up(self, party_id: int, frame: bytes) -> None:
        await self._write(self._side(self._party_side, party_id)[1], frame)

    async def recv_up(self, party_id: int) -> bytes:
        reader = self._side(self._active_side, party_id)[0]
        return await self._with_timeout(read_frame(reader), f"up frame from party {party_id}")

    async def close(self) -> None:
        writers = [w for _, w in self._party_side.values()] + [w for _, w in self._active_side.values()]
        for w in writers:
            w.close()
        for w in writers:
            try:
                await w.wait_closed()
            except (ConnectionError, OSError):
                pass
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        self._party_side.clear()
        self._active_side.clear()


def make_transport(kind: TransportKind, timeout: float = DEFAULT_TIMEOUT) -> Transport:
    if kind == "inproc":
        return InProcessTransport(timeout)
    if kind == "socket":
        return SocketTransport(timeout=timeout)
    raise ValueError(f"unknown transport {kind!r}")


# ---------------------------------------------------------------------------
# Session discipline
# ---------------------------------------------------------------------------

class RoundGuard:
    """Rejects a message whose round goes backwards on its (party, direction) stream."""

    def __init__(self) -> None:
        self._last: dict[tuple[int, str], int] = {}

    def check(self, party_id: int, direction: str, round_: int) -> None:
        key = (party_id, direction)
        last = self._last.get(key)
        if last is not None and round_ < last:
            raise ProtocolError(
                f"party {party_id} {direction} stream went from round {last} back to {round_}"
            )
        self._last[key] = round_
