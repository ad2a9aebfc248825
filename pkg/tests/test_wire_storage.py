"""Frame encoding and append-only logs."""

from __future__ import annotations

import json
import shutil
import struct
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gryphon.errors import FrameError, LogCorruptError
from gryphon.storage import FileLogStore, MemoryLog, replay_log, scan_frames
from gryphon.wire import FRAME_TYPES, MAX_PAYLOAD, FrameReader, decode_frame, encode_frame

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = json.loads((FIXTURES / "frames" / "frames.json").read_text())


def test_golden_covers_every_type():
    assert sorted(GOLDEN) == sorted(FRAME_TYPES)
    assert len(FRAME_TYPES) == 12


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_bytes(name):
    want = (FIXTURES / "frames" / f"{name}.bin").read_bytes()
    assert encode_frame(GOLDEN[name]) == want
    assert decode_frame(want) == GOLDEN[name]
    assert struct.unpack(">I", want[:4])[0] == len(want) - 4


def test_encoding_is_canonical():
    a = encode_frame({"type": "ACK", "space": "X", "through": 3})
    b = encode_frame({"through": 3, "space": "X", "type": "ACK"})
    assert a == b


def test_unknown_type_rejected():
    with pytest.raises(FrameError) as info:
        encode_frame({"type": "HELLO"})
    assert info.value.code == "unknown-type"
    payload = b'{"type":"HELLO"}'
    with pytest.raises(FrameError):
        decode_frame(struct.pack(">I", len(payload)) + payload)


def test_oversize_payload_rejected():
    with pytest.raises(FrameError) as info:
        encode_frame({"type": "ERROR", "code": "x", "message": "m" * MAX_PAYLOAD})
    assert info.value.code == "too-large"
    with pytest.raises(FrameError):
        list(FrameReader().feed(struct.pack(">I", MAX_PAYLOAD + 1)))


def test_reader_survives_garbage_between_frames():
    good = encode_frame({"type": "STATS"})
    junk = struct.pack(">I", 5) + b"nope!"
    out = list(FrameReader().feed(good + junk + good))
    assert [f["type"] for f in out] == ["STATS", "ERROR", "STATS"]
    assert out[1]["bad"] is True


@given(st.lists(st.sampled_from(sorted(GOLDEN)), max_size=20), st.integers(1, 64))
def test_reader_reassembles_any_chunking(names, chunk):
    data = b"".join(encode_frame(GOLDEN[n]) for n in names)
    reader = FrameReader()
    out = []
    for i in range(0, len(data), chunk):
        out.extend(reader.feed(data[i:i + chunk]))
    assert out == [GOLDEN[n] for n in names]
    assert reader.pending == 0


# -- logs ------------------------------------------------------------------


def test_torn_tail_is_truncated(tmp_path):
    shutil.copy(FIXTURES / "torn.log", tmp_path / "NYSE.log")
    store = FileLogStore(tmp_path)
    frames = replay_log(store.open("NYSE"))
    assert [f["seq"] for f in frames] == [1, 2, 3]
    assert frames[-1]["values"] == ["IBM", 55.0, 700]
    store.close()
    assert (tmp_path / "NYSE.log").stat().st_size == 249


def test_append_after_repair_continues_cleanly(tmp_path):
    shutil.copy(FIXTURES / "torn.log", tmp_path / "NYSE.log")
    store = FileLogStore(tmp_path)
    log = store.open("NYSE")
    replay_log(log)
    log.append({"type": "EVENT", "space": "NYSE", "seq": 4, "values": ["DELL", 9.0, 5], "origin": "c1"})
    assert [f["seq"] for f in replay_log(log)] == [1, 2, 3, 4]
    store.close()


def test_empty_log():
    assert replay_log(MemoryLog()) == []


def test_corrupt_middle_frame_refuses():
    data = bytearray((FIXTURES / "torn.log").read_bytes()[:249])
    data[10] = 0xFF  # inside the first payload
    with pytest.raises(LogCorruptError):
        scan_frames(bytes(data))


def test_non_event_frame_refuses():
    data = encode_frame({"type": "STATS"}) + encode_frame({"type": "EVENT", "space": "A", "seq": 1,
                                                           "values": [1], "origin": ""})
    with pytest.raises(LogCorruptError):
        scan_frames(data)


@given(st.integers(0, 262))
def test_every_truncation_point_keeps_the_complete_prefix(cut):
    data = (FIXTURES / "torn.log").read_bytes()[:cut]
    log = MemoryLog(data)
    frames = replay_log(log)
    boundaries = [0]
    for f in scan_frames((FIXTURES / "torn.log").read_bytes()[:249])[0]:
        boundaries.append(boundaries[-1] + len(encode_frame(f)))
    kept = max(b for b in boundaries if b <= cut)
    assert len(log.read()) == kept
    assert len(frames) == boundaries.index(kept)
