"""Blocking TCP client for the framed broker protocol."""

from __future__ import annotations

import itertools
import socket
import time
from collections.abc import Iterator

from .errors import GryphonError
from .interp import InterpSpec
from .model import Schema
from .session import OptimisticSession, OrderedSession
from .wire import FrameReader, encode_frame


class ClientError(GryphonError):
    code = "client"


class Client:
    def __init__(self, host: str, port: int, client_id: str, timeout: float = 10.0):
        self.id = client_id
        self.timeout = timeout
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.reader = FrameReader()
        self.inbox: list[dict] = []
        # publish ids start from the wall clock so a new process reusing a client id
        # is not mistaken for a retry of an earlier one
        self._pub = itertools.count(time.time_ns() // 1000)
        self.send({"type": "CONNECT", "client": client_id})
        self.hello = self.expect(lambda f: f.get("type") == "CONNECT")

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> Client:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def send(self, frame: dict) -> None:
        self.sock.sendall(encode_frame(frame))

    def recv(self, timeout: float | None = None) -> dict | None:
        """Next frame, or None if nothing arrives within ``timeout``."""
        if self.inbox:
            return self.inbox.pop(0)
        self.sock.settimeout(self.timeout if timeout is None else timeout)
        while not self.inbox:
            try:
                data = self.sock.recv(65536)
            except TimeoutError:
                return None
            if not data:
                raise ClientError("broker closed the connection", "disconnected")
            self.inbox.extend(self.reader.feed(data))
        return self.inbox.pop(0)

    def expect(self, want, timeout: float | None = None) -> dict:
        """Wait for a frame satisfying ``want``; frames that do not match are kept."""
        deadline = time.monotonic() + (self.timeout if timeout is None else timeout)
        skipped: list[dict] = []
        try:
            while True:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise ClientError("timed out waiting for the broker", "timeout")
                f = self.recv(left)
                if f is None:
                    continue
                if want(f):
                    return f
                skipped.append(f)
        finally:
            self.inbox[:0] = skipped

    # -- requests ----------------------------------------------------------

    def publish(self, space: str, values: list) -> dict:
        """Publish and wait for the sequenced ACK (or an ERROR)."""
        pub = next(self._pub)
        self.send({"type": "PUBLISH", "space": space, "values": values, "origin": self.id, "pub": pub})
        return self.expect(lambda f: f.get("pub") == pub and f.get("type") in ("ACK", "ERROR"))

    def meta(self, kind: str, payload: dict, request_id: str | None = None) -> dict:
        frame = {"type": "META_REQUEST", "kind": kind, "payload": payload,
                 "request_id": request_id or f"{self.id}-{time.time_ns()}"}
        self.send(frame)
        rid = frame["request_id"]
        return self.expect(lambda f: (f.get("type") == "META_CONFIRM" and f.get("request_id") == rid)
                           or f.get("type") == "ERROR")

    def stats(self) -> dict:
        self.send({"type": "STATS"})
        return self.expect(lambda f: f.get("type") == "STATS")["stats"]

    def subscribe(self, space: str, mode: str = "ordered", predicate: str | None = None, start: int = 0,
                  sub: str | None = None, spec: InterpSpec | None = None, schema: Schema | None = None,
                  idle: float | None = None) -> Iterator[dict]:
        """Yield delivered EVENT frames and, in optimistic modes, SNAPSHOT frames.

        Gaps are repaired with NACKs and progress is acknowledged.  Stops
        after ``idle`` seconds without traffic when ``idle`` is given.
        """
        sub = sub or space
        frame = {"type": "SUBSCRIBE", "space": space, "sub": sub, "mode": mode, "from": start}
        if predicate:
            frame["predicate"] = predicate
        self.send(frame)
        if mode == "ordered":
            session = OrderedSession(space, sub, cursor=start)
        else:
            if spec is None or schema is None:
                raise ClientError("optimistic modes need the interpretation spec and schema", "usage")
            session = OptimisticSession(space, spec, schema, sub)
        t0 = time.monotonic()
        last = t0
        while True:
            now = int((time.monotonic() - t0) * 100)
            f = self.recv(0.2)
            if f is None:
                if session.gap_due(now):
                    self.send(session.nack(now))
                if idle is not None and time.monotonic() - last > idle:
                    return
                continue
            last = time.monotonic()
            if f.get("type") == "ERROR":
                raise ClientError(f.get("message", "error"), f.get("code", "error"))
            if f.get("sub") != sub:
                continue
            if f["type"] == "SNAPSHOT" and isinstance(session, OptimisticSession):
                session.on_snapshot(f["state"], f["through"], now)
                yield f
            elif f["type"] == "EVENT":
                yield from session.receive(f, now)
            self.send(session.ack())
