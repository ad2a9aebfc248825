"""Serve one broker over TCP with asyncio.

The broker core is single-threaded and callback driven; this module
supplies its runtime: a clock in ticks (10 ms each), timers on the event
loop, and framed TCP connections to neighbouring brokers and to clients.

Every broker dials each neighbour and uses that connection for its own
outgoing link frames; it opens with a transport hello (a CONNECT frame
with ``transport`` set) so the accepting side knows which peer it is.
Frames sent while a peer is unreachable are dropped; the link layer
retransmits them once the connection is back.
"""

from __future__ import annotations

import asyncio
import logging
import os
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

from .broker import Broker
from .errors import FrameError
from .graph import FlowGraph
from .storage import FileLogStore
from .wire import FrameReader, encode_frame, error_frame

TICK = 0.01
RECONNECT_DELAY = 0.5
log = logging.getLogger(__name__)


def parse_address(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return default_host, int(text)
    return host or default_host, int(port)


def bump_epoch(data_dir: Path) -> int:
    """Read, increment and durably store this broker's incarnation number."""
    path = Path(data_dir) / "epoch"
    path.parent.mkdir(parents=True, exist_ok=True)
    epoch = int(path.read_text().strip() or 0) + 1 if path.exists() else 1
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        fh.write(f"{epoch}\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return epoch


class AsyncRuntime:
    def __init__(self, server: BrokerServer):
        self.server = server
        self.loop = asyncio.get_running_loop()
        self.t0 = self.loop.time()

    def now(self) -> int:
        return int((self.loop.time() - self.t0) / TICK)

    def send(self, dst: str, frame: dict) -> None:
        self.server.send(dst, frame)

    def call_later(self, delay: int, fn: Callable[[], None]):
        return self.loop.call_later(delay * TICK, self.server.guard, fn)

    def trace(self, kind: str, **fields) -> None:
        log.debug("%s %s", kind, fields)


@dataclass
class BrokerServer:
    broker_id: str
    graph: FlowGraph
    listen: tuple[str, int]
    peers: dict[str, tuple[str, int]]
    data_dir: Path
    broker: Broker | None = None
    epoch: int = 0
    _peer_writers: dict[str, asyncio.StreamWriter] = field(default_factory=dict)
    _clients: dict[str, asyncio.StreamWriter] = field(default_factory=dict)
    _anon: int = 0
    _server: asyncio.base_events.Server | None = None
    _tasks: set = field(default_factory=set)

    async def start(self) -> None:
        missing = [p for p in self.graph.neighbors[self.broker_id] if p not in self.peers]
        if missing:
            raise ValueError(f"no address for neighbour(s) {', '.join(missing)}")
        self.epoch = bump_epoch(self.data_dir)
        self._server = await asyncio.start_server(self._accept, *self.listen)
        self.broker = Broker(self.broker_id, self.graph, AsyncRuntime(self), FileLogStore(self.data_dir),
                             epoch=self.epoch)
        for peer in self.graph.neighbors[self.broker_id]:
            self._spawn(self._dial(peer))
        self.guard(self.broker.start)
        log.info("broker %s epoch %d listening on %s:%d", self.broker_id, self.epoch, *self.listen)

    @property
    def port(self) -> int:
        return self._server.sockets[0].getsockname()[1]

    def _spawn(self, coro) -> None:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    def guard(self, fn: Callable[[], None]) -> None:
        """Run broker code; a bug in one callback must not kill the server."""
        try:
            fn()
        except Exception:
            log.exception("broker callback failed")

    # -- outgoing --------------------------------------------------------

    def send(self, dst: str, frame: dict) -> None:
        w = self._peer_writers.get(dst) if dst in self.graph.brokers else self._clients.get(dst)
        if w is None or w.is_closing():
            return
        try:
            w.write(encode_frame(frame))
        except (FrameError, ConnectionError) as exc:
            log.warning("dropping frame to %s: %s", dst, exc)

    async def _dial(self, peer: str) -> None:
        host, port = self.peers[peer]
        while True:
            try:
                reader, writer = await asyncio.open_connection(host, port)
            except OSError:
                await asyncio.sleep(RECONNECT_DELAY)
                continue
            writer.write(encode_frame({"type": "CONNECT", "broker": self.broker_id, "transport": True}))
            self._peer_writers[peer] = writer
            self.guard(self.broker.channels[peer].connect)
            try:
                # the dialled side never writes on this connection; wait for it to close
                while await reader.read(65536):
                    pass
            except OSError:
                pass
            self._peer_writers.pop(peer, None)
            writer.close()
            await asyncio.sleep(RECONNECT_DELAY)

    # -- incoming --------------------------------------------------------

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        frames = FrameReader()
        who: str | None = None
        is_peer = False
        try:
            while data := await reader.read(65536):
                try:
                    batch = list(frames.feed(data))
                except FrameError as exc:
                    writer.write(encode_frame(error_frame(exc.code, str(exc))))
                    break
                for frame in batch:
                    if who is None:
                        if frame.get("transport") and frame.get("broker") in self.graph.brokers:
                            who, is_peer = frame["broker"], True
                            continue
                        if frame.get("type") == "CONNECT" and frame.get("client"):
                            who = str(frame["client"])
                        else:
                            self._anon += 1
                            who = f"anon-{self._anon}"
                        if who in self.graph.brokers:
                            writer.write(encode_frame(error_frame("bad-client", "client id names a broker")))
                            return
                        self._clients[who] = writer
                    self.guard(lambda f=frame, w=who: self.broker.on_frame(f, w))
                await writer.drain()
        except (OSError, asyncio.IncompleteReadError):
            pass
        finally:
            if who is not None and not is_peer and self._clients.get(who) is writer:
                del self._clients[who]
                self.guard(lambda: self.broker.client_gone(who))
            writer.close()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for task in list(self._tasks):
            task.cancel()
        for w in list(self._peer_writers.values()) + list(self._clients.values()):
            w.close()
        if self.broker is not None:
            self.broker.store.close()


async def serve(broker_id: str, graph: FlowGraph, listen: tuple[str, int], peers: dict[str, tuple[str, int]],
                data_dir: Path, ready: Callable[[BrokerServer], None] | None = None) -> None:
    srv = BrokerServer(broker_id, graph, listen, peers, Path(data_dir))
    await srv.start()
    if ready is not None:
        ready(srv)
    try:
        await asyncio.Event().wait()
    finally:
        await srv.close()
