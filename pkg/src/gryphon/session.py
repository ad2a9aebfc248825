"""Client-side delivery: ordered, optimistic and snapshot sessions.

Every EVENT a broker sends to a client carries ``prev``, the seq of the
previous event on that subscription (0 before the first).  The chain lets
a client spot gaps even when a predicate filters the space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .interp import InterpSpec, InterpState
from .model import Event, Schema

GAP_TIMEOUT = 20
BUFFER_LIMIT = 4096


@dataclass
class OrderedSession:
    """Releases the maximal gap-free run; holds everything else."""

    space: str
    sub: str = "s"
    cursor: int = 0
    buffer: dict[int, dict] = field(default_factory=dict)
    gap_since: int | None = None
    limit: int = BUFFER_LIMIT
    resets: int = 0
    duplicates: int = 0

    mode = "ordered"

    def receive(self, frame: dict, now: int = 0) -> list[dict]:
        seq, prev = frame["seq"], frame.get("prev", frame["seq"] - 1)
        if seq <= self.cursor or prev < self.cursor:
            self.duplicates += 1
            return []
        if prev in self.buffer:
            if self.buffer[prev]["seq"] == seq:
                self.duplicates += 1
            return []
        self.buffer[prev] = frame
        out = []
        while self.cursor in self.buffer:
            f = self.buffer.pop(self.cursor)
            self.cursor = f["seq"]
            out.append(f)
        if out:
            # stale entries can only come from a broker resend with a shorter chain
            for p in [p for p in self.buffer if p < self.cursor]:
                del self.buffer[p]
        if len(self.buffer) > self.limit:
            self.buffer.clear()
            self.resets += 1
            self.gap_since = None
            return out
        if self.buffer:
            if self.gap_since is None or out:
                self.gap_since = now
        else:
            self.gap_since = None
        return out

    def gap_due(self, now: int, timeout: int = GAP_TIMEOUT) -> bool:
        return self.gap_since is not None and now - self.gap_since >= timeout

    def nack(self, now: int) -> dict:
        self.gap_since = now
        return {"type": "NACK", "space": self.space, "sub": self.sub, "from": self.cursor}

    def ack(self) -> dict:
        return {"type": "ACK", "space": self.space, "sub": self.sub, "through": self.cursor}


def deliver_ordered(session: OrderedSession, incoming: dict, now: int = 0) -> list[dict]:
    return session.receive(incoming, now)


@dataclass
class OptimisticSession:
    """Applies events on arrival; SNAPSHOT frames repair anything lost.

    ``watermark`` is the end of the gap-free prefix of the prev chain.
    Events above it are retained so a snapshot taken before they arrived
    can be topped up.
    """

    space: str
    spec: InterpSpec
    schema: Schema
    sub: str = "s"
    state: InterpState = None
    watermark: int = 0
    retained: dict[int, dict] = field(default_factory=dict)
    by_prev: dict[int, int] = field(default_factory=dict)
    gap_since: int | None = None
    snapshots: int = 0
    applied: int = 0
    compressed: int = 0

    mode = "optimistic"

    def __post_init__(self):
        if self.state is None:
            self.state = InterpState(self.spec)

    @property
    def cursor(self) -> int:
        return self.watermark

    def _event(self, frame: dict) -> Event:
        schema = self.spec.expansion_schema if frame.get("compressed") else self.schema
        return Event(schema, tuple(frame["values"]), frame["seq"], frame.get("origin", ""))

    def receive(self, frame: dict, now: int = 0) -> list[dict]:
        seq = frame["seq"]
        prev = frame.get("prev", seq - 1)
        if seq <= self.watermark:
            return []
        if self.state.apply(self._event(frame)):
            self.applied += 1
            if frame.get("compressed"):
                self.compressed += 1
        self.retained[seq] = frame
        self.by_prev[prev] = seq
        self._advance(now)
        return [frame]

    def _advance(self, now: int) -> None:
        # an event whose prev is already covered extends the gap-free prefix
        while self.by_prev:
            p = min(self.by_prev)
            if p > self.watermark:
                break
            self.watermark = max(self.watermark, self.by_prev.pop(p))
        self._trim()
        if self.retained:
            if self.gap_since is None:
                self.gap_since = now
        else:
            self.gap_since = None

    def _trim(self) -> None:
        for s in [s for s in self.retained if s <= self.watermark]:
            del self.retained[s]
        self.state.compact(self.watermark)

    def mark_through(self, through: int, now: int = 0) -> None:
        """Everything up to ``through`` has been conveyed (end of a compressed delta)."""
        if through > self.watermark:
            self.watermark = through
        self._advance(now)

    def on_snapshot(self, doc: dict, through: int, now: int = 0) -> None:
        if through < self.watermark:
            return
        state = InterpState.from_doc(self.spec, doc)
        state.compact(through)
        for seq in sorted(self.retained):
            if seq > through:
                state.apply(self._event(self.retained[seq]))
        self.state = state
        self.snapshots += 1
        self.watermark = through
        self._advance(now)

    def gap_due(self, now: int, timeout: int = GAP_TIMEOUT) -> bool:
        return self.gap_since is not None and now - self.gap_since >= timeout

    def nack(self, now: int) -> dict:
        self.gap_since = now
        return {"type": "NACK", "space": self.space, "sub": self.sub, "from": self.watermark}

    def ack(self) -> dict:
        return {"type": "ACK", "space": self.space, "sub": self.sub, "through": self.watermark}


def deliver_optimistic(session: OptimisticSession, incoming: dict, now: int = 0) -> list[dict]:
    return session.receive(incoming, now)
