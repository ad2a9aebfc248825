"""Append-only event logs, one ``<space>.log`` per durable history.

The file is a sequence of EVENT frames.  Replay keeps the longest valid
prefix: one trailing torn frame is truncated, damage anywhere before the
tail refuses to start.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path

from .errors import FrameError, LogCorruptError
from .wire import HEADER, HEADER_SIZE, MAX_PAYLOAD, decode_payload, encode_frame

log = logging.getLogger(__name__)


class MemoryLog:
    """In-memory log; the simulator keeps these across broker crashes."""

    def __init__(self, data: bytes = b""):
        self.data = bytearray(data)
        self.syncs = 0

    def read(self) -> bytes:
        return bytes(self.data)

    def append(self, frame: dict) -> None:
        self.data.extend(encode_frame(frame))
        self.syncs += 1

    def truncate(self, size: int) -> None:
        del self.data[size:]


class FileLog:
    """File-backed log; ``append`` returns only after fsync."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "ab")

    def read(self) -> bytes:
        self._fh.flush()
        return self.path.read_bytes()

    def append(self, frame: dict) -> None:
        self._fh.write(encode_frame(frame))
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def truncate(self, size: int) -> None:
        self._fh.flush()
        with open(self.path, "r+b") as fh:
            fh.truncate(size)
            fh.flush()
            os.fsync(fh.fileno())

    def close(self) -> None:
        self._fh.close()


class MemoryLogStore:
    def __init__(self):
        self.logs: dict[str, MemoryLog] = {}

    def open(self, space: str) -> MemoryLog:
        return self.logs.setdefault(space, MemoryLog())


class FileLogStore:
    def __init__(self, data_dir: Path):
        self.data_dir = Path(data_dir)
        self._open: dict[str, FileLog] = {}

    def open(self, space: str) -> FileLog:
        if space not in self._open:
            self._open[space] = FileLog(self.data_dir / f"{space}.log")
        return self._open[space]

    def close(self) -> None:
        for fh in self._open.values():
            fh.close()
        self._open.clear()


def scan_frames(data: bytes) -> tuple[list[dict], int]:
    """Decode ``data`` into frames; returns (frames, length of valid prefix)."""
    frames: list[dict] = []
    pos = 0
    while pos < len(data):
        if len(data) - pos < HEADER_SIZE:
            break
        (length,) = HEADER.unpack_from(data, pos)
        end = pos + HEADER_SIZE + length
        if length > MAX_PAYLOAD:
            if end >= len(data):
                break
            raise LogCorruptError(f"frame at byte {pos} claims {length} bytes")
        if end > len(data):
            break
        try:
            frame = decode_payload(data[pos + HEADER_SIZE:end])
        except FrameError as exc:
            if end == len(data):
                break
            raise LogCorruptError(f"corrupt frame at byte {pos}: {exc}") from None
        if frame.get("type") != "EVENT":
            raise LogCorruptError(f"non-EVENT frame at byte {pos}")
        frames.append(frame)
        pos = end
    return frames, pos


def replay_log(store_log) -> list[dict]:
    """Recover the valid prefix of a log, truncating a torn tail in place."""
    data = store_log.read()
    frames, valid = scan_frames(data)
    if valid < len(data):
        log.warning("truncating %d torn bytes from log", len(data) - valid)
        store_log.truncate(valid)
    return frames
