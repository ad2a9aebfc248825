"""Reliable FIFO channels between neighbouring brokers.

Frames on a channel carry ``lseq`` (per-direction link sequence),
``epoch`` (the sender's incarnation) and ``to_epoch`` (the incarnation of
the receiver it was meant for).  The receiver delivers in ``lseq`` order,
acknowledges cumulatively and asks for a resend when a gap persists; the
sender also resends on a retransmission timeout.  A CONNECT handshake
learns the peer's incarnation.  When the peer comes back with a higher
epoch both directions restart from ``lseq`` 1 and the broker is told, so
it can re-subscribe whatever was flowing through the lost incarnation.
"""

from __future__ import annotations

from collections.abc import Callable
from typing import Protocol

GAP_TIMEOUT = 20
RTO = 40
RTO_MAX = 320
ACK_DELAY = 2
WINDOW = 64


class Handle(Protocol):
    def cancel(self) -> None: ...


class Runtime(Protocol):
    """What a broker needs from its host: a clock, a transport and timers."""

    def now(self) -> int: ...

    def send(self, dst: str, frame: dict) -> None: ...

    def call_later(self, delay: int, fn: Callable[[], None]) -> Handle: ...

    def trace(self, kind: str, **fields) -> None: ...


class Timer:
    """One-shot timer that can be re-armed; at most one pending firing."""

    def __init__(self, runtime: Runtime, fn: Callable[[], None]):
        self.runtime = runtime
        self.fn = fn
        self.handle: Handle | None = None

    @property
    def armed(self) -> bool:
        return self.handle is not None

    def arm(self, delay: int) -> None:
        if self.handle is None:
            self.handle = self.runtime.call_later(delay, self._fire)

    def rearm(self, delay: int) -> None:
        self.cancel()
        self.arm(delay)

    def cancel(self) -> None:
        if self.handle is not None:
            self.handle.cancel()
            self.handle = None

    def _fire(self) -> None:
        self.handle = None
        self.fn()


class LinkChannel:
    def __init__(self, me: str, epoch: int, peer: str, runtime: Runtime,
                 deliver: Callable[[dict, str], None], on_reset: Callable[[str, int], None]):
        self.me = me
        self.epoch = epoch
        self.peer = peer
        self.rt = runtime
        self.deliver = deliver
        self.on_reset = on_reset
        self.peer_epoch: int | None = None
        self.up = False
        self.queue: list[dict] = []
        self.next_lseq = 1
        self.unacked: dict[int, dict] = {}
        self.expect = 1
        self.rbuf: dict[int, dict] = {}
        self.rto = RTO
        self.retransmits = 0
        self.sent = 0
        self._rto_timer = Timer(runtime, self._on_rto)
        self._ack_timer = Timer(runtime, self._send_ack)
        self._gap_timer = Timer(runtime, self._on_gap)
        self._connect_timer = Timer(runtime, self.connect)

    # -- handshake -----------------------------------------------------------

    def connect(self) -> None:
        if self.up:
            return
        frame = {"type": "CONNECT", "broker": self.me, "epoch": self.epoch}
        if self.peer_epoch is not None:
            frame["to_epoch"] = self.peer_epoch
        self.rt.send(self.peer, frame)
        self._connect_timer.arm(RTO)

    def _on_connect(self, frame: dict) -> None:
        e = frame.get("epoch", 0)
        if self.peer_epoch is not None and e < self.peer_epoch:
            return
        if self.peer_epoch is None or e > self.peer_epoch:
            restarted = self.peer_epoch is not None
            self._reset()
            self.peer_epoch = e
            if restarted:
                self.on_reset(self.peer, e)
        if frame.get("reply"):
            if frame.get("to_epoch") != self.epoch:
                return
        else:
            self.rt.send(self.peer, {"type": "CONNECT", "broker": self.me, "epoch": self.epoch,
                                     "reply": True, "to_epoch": e})
        if not self.up:
            self.up = True
            self._connect_timer.cancel()
            queued, self.queue = self.queue, []
            for inner in queued:
                self.send(inner)

    def _reset(self) -> None:
        # frames for the old incarnation are void; upper layers re-subscribe
        self.unacked.clear()
        self.next_lseq = 1
        self.expect = 1
        self.rbuf.clear()
        self.rto = RTO
        for t in (self._rto_timer, self._ack_timer, self._gap_timer):
            t.cancel()

    # -- sending -------------------------------------------------------------

    def send(self, inner: dict) -> None:
        if not self.up:
            self.queue.append(inner)
            return
        lseq = self.next_lseq
        self.next_lseq += 1
        frame = dict(inner, lseq=lseq, epoch=self.epoch, to_epoch=self.peer_epoch)
        self.unacked[lseq] = frame
        self.sent += 1
        self.rt.send(self.peer, frame)
        self._rto_timer.arm(self.rto)

    def _resend(self, start: int) -> None:
        n = 0
        for lseq, frame in self.unacked.items():
            if lseq < start:
                continue
            if n >= WINDOW:
                break
            self.rt.send(self.peer, frame)
            self.retransmits += 1
            n += 1

    def _on_rto(self) -> None:
        if not self.unacked:
            return
        self._resend(0)
        self.rto = min(self.rto * 2, RTO_MAX)
        self._rto_timer.arm(self.rto)

    def _on_ack(self, lack: int) -> None:
        progressed = False
        for lseq in [s for s in self.unacked if s <= lack]:
            del self.unacked[lseq]
            progressed = True
        if progressed:
            self.rto = RTO
            self._rto_timer.cancel()
            if self.unacked:
                self._rto_timer.arm(self.rto)

    # -- receiving -----------------------------------------------------------

    def on_frame(self, frame: dict) -> None:
        t = frame.get("type")
        if t == "CONNECT" and "lseq" not in frame:
            self._on_connect(frame)
            return
        if frame.get("epoch") != self.peer_epoch or frame.get("to_epoch") != self.epoch:
            return
        if "lseq" not in frame:
            if t == "ACK" and "lack" in frame:
                self._on_ack(frame["lack"])
            elif t == "NACK" and "lfrom" in frame:
                self._resend(frame["lfrom"])
            return
        lseq, epoch = frame["lseq"], frame["epoch"]
        if lseq >= self.expect and lseq not in self.rbuf:
            self.rbuf[lseq] = frame
            while self.expect in self.rbuf:
                inner = self.rbuf.pop(self.expect)
                self.expect += 1
                for k in ("lseq", "epoch", "to_epoch"):
                    inner.pop(k, None)
                self.deliver(inner, self.peer)
                if self.peer_epoch != epoch:
                    return  # a delivery reset this channel
            if self.rbuf:
                self._gap_timer.arm(GAP_TIMEOUT)
            else:
                self._gap_timer.cancel()
        self._ack_timer.arm(ACK_DELAY)

    def _send_ack(self) -> None:
        self.rt.send(self.peer, {"type": "ACK", "lack": self.expect - 1,
                                 "epoch": self.epoch, "to_epoch": self.peer_epoch})

    def _on_gap(self) -> None:
        if self.rbuf:
            self.rt.send(self.peer, {"type": "NACK", "lfrom": self.expect,
                                     "epoch": self.epoch, "to_epoch": self.peer_epoch})
            self._gap_timer.arm(GAP_TIMEOUT)

    @property
    def idle(self) -> bool:
        return self.up and not self.unacked and not self.rbuf and not self.queue
