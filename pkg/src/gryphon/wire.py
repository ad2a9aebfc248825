"""Length-prefixed JSON frames.

A frame is a 4-byte big-endian payload length followed by a UTF-8 JSON
object whose ``type`` field names the message.  Encoding is canonical
(sorted keys, no whitespace) so identical frames are identical bytes.

Fields per type (``?`` marks optional)::

    CONNECT       client | broker, epoch?, restart?, origin?
    PUBLISH       space, values, origin, pub, dst?
    SUBSCRIBE     space, sub, predicate?, mode?, from?, key?, state?
    UNSUBSCRIBE   space, sub
    EVENT         space, seq, values, origin, prev?, key?, pub?, prov?
    ACK           space?, through?, pub?, sub?, lack?, epoch?
    NACK          space?, from?, lfrom?, epoch?
    SNAPSHOT      space, state, through
    META_REQUEST  kind, payload, request_id?, origin?
    META_CONFIRM  phase, request_id, ...
    STATS         stats?
    ERROR         code, message

Broker-to-broker link frames additionally carry ``lseq`` and ``epoch``.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Iterator

from .errors import FrameError

HEADER = struct.Struct(">I")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 1024 * 1024

FRAME_TYPES = (
    "CONNECT",
    "PUBLISH",
    "SUBSCRIBE",
    "UNSUBSCRIBE",
    "EVENT",
    "ACK",
    "NACK",
    "SNAPSHOT",
    "META_REQUEST",
    "META_CONFIRM",
    "STATS",
    "ERROR",
)
_TYPES = frozenset(FRAME_TYPES)


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def encode_frame(frame: dict) -> bytes:
    if frame.get("type") not in _TYPES:
        raise FrameError(f"unknown frame type {frame.get('type')!r}", "unknown-type")
    payload = dumps(frame).encode("utf-8")
    if len(payload) > MAX_PAYLOAD:
        raise FrameError(f"frame payload {len(payload)} bytes exceeds {MAX_PAYLOAD}", "too-large")
    return HEADER.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> dict:
    try:
        frame = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"bad frame payload: {exc}", "bad-payload") from None
    if not isinstance(frame, dict):
        raise FrameError("frame payload is not an object", "bad-payload")
    if frame.get("type") not in _TYPES:
        raise FrameError(f"unknown frame type {frame.get('type')!r}", "unknown-type")
    return frame


def decode_frame(data: bytes) -> dict:
    if len(data) < HEADER_SIZE:
        raise FrameError("short frame header", "torn")
    (length,) = HEADER.unpack_from(data)
    if length > MAX_PAYLOAD:
        raise FrameError(f"frame length {length} exceeds {MAX_PAYLOAD}", "too-large")
    if len(data) != HEADER_SIZE + length:
        raise FrameError("frame length does not match data", "torn")
    return decode_payload(data[HEADER_SIZE:])


def error_frame(code: str, message: str) -> dict:
    return {"type": "ERROR", "code": code, "message": message}


class FrameReader:
    """Incremental decoder for a byte stream of frames.

    An undecodable payload yields an ERROR frame dict (with ``bad`` set)
    rather than raising, so a connection survives a garbage message.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> Iterator[dict]:
        self._buf.extend(data)
        while len(self._buf) >= HEADER_SIZE:
            (length,) = HEADER.unpack_from(self._buf)
            if length > MAX_PAYLOAD:
                raise FrameError(f"frame length {length} exceeds {MAX_PAYLOAD}", "too-large")
            end = HEADER_SIZE + length
            if len(self._buf) < end:
                return
            payload = bytes(self._buf[HEADER_SIZE:end])
            del self._buf[:end]
            try:
                yield decode_payload(payload)
            except FrameError as exc:
                yield {"type": "ERROR", "code": exc.code, "message": str(exc), "bad": True}

    @property
    def pending(self) -> int:
        return len(self._buf)
