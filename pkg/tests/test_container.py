import json
import struct

import pytest

from ocpw import DecodeError
from ocpw.container import (
    ABORTED,
    COMPLETE,
    FIXED,
    FLAG_OFFSET,
    METADATA_OFFSET_AT,
    SharedFile,
    Throttle,
    WriteChannel,
    finalize,
    header_bytes,
    mark,
    open_container,
)
from ocpw.planner import OffsetMetadata, encode_metadata


def build(path, flag=COMPLETE):
    head = header_bytes(1, 2, {"names": ["a"]})
    with SharedFile(path, create=True) as f:
        f.pwrite(0, head)
        f.pwrite(len(head), b"hello")
        f.pwrite(len(head) + 8, b"wor")
        f.pwrite(len(head) + 16, b"ld")
        meta = encode_metadata([OffsetMetadata(len(head), 5), OffsetMetadata(len(head) + 8, 5, len(head) + 16, 2)])
        if flag == COMPLETE:
            finalize(f, len(head) + 24, meta)
        else:
            mark(f, flag)
    return head


def test_header_layout():
    head = header_bytes(9, 4096, {"k": 1})
    assert len(head) % 8 == 0
    magic, version, flag, fields, ranks, size, meta = FIXED.unpack_from(head)
    assert (magic, version, flag, fields, ranks, size, meta) == (b"OCPW", 1, 0, 9, 4096, len(head), 0)
    assert head[FLAG_OFFSET] == 0
    assert FIXED.size == METADATA_OFFSET_AT + 8


def test_round_trip(tmp_path):
    path = tmp_path / "c.ocpw"
    build(path)
    c = open_container(path)
    assert c.descriptor == {"names": ["a"]}
    assert (c.field_count, c.rank_count) == (1, 2)
    with SharedFile(path) as f:
        assert c.read_entry(f, 0, 0) == b"hello"
        assert c.read_entry(f, 1, 0) == b"world"


@pytest.mark.parametrize("flag, word", [(0, "incomplete"), (ABORTED, "aborted")])
def test_unfinished_container_rejected(tmp_path, flag, word):
    path = tmp_path / "c.ocpw"
    build(path, flag)
    with pytest.raises(DecodeError, match=word):
        open_container(path)


def test_truncated_and_bad_magic(tmp_path):
    path = tmp_path / "c.ocpw"
    build(path)
    data = path.read_bytes()
    path.write_bytes(data[:-4])
    with pytest.raises(DecodeError):
        open_container(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(DecodeError, match="magic"):
        open_container(path)
    path.write_bytes(b"OC")
    with pytest.raises(DecodeError):
        open_container(path)


def test_metadata_pointing_past_end(tmp_path):
    path = tmp_path / "c.ocpw"
    head = build(path)
    data = bytearray(path.read_bytes())
    (meta_off,) = struct.unpack_from("<Q", data, METADATA_OFFSET_AT)
    struct.pack_into("<Q", data, meta_off + 16, 10**9)
    path.write_bytes(bytes(data))
    with pytest.raises(DecodeError):
        open_container(path)


def test_on_write_hook_records_ranges(tmp_path):
    seen = []
    with SharedFile(tmp_path / "x", create=True, on_write=lambda o, n, r: seen.append((o, n, r))) as f:
        WriteChannel(f, 3).write(10, b"abc")
    assert seen == [(10, 3, 3)]


def test_throttle_paces(tmp_path):
    import time

    with SharedFile(tmp_path / "x", create=True) as f:
        ch = WriteChannel(f, 0, bandwidth=1e6)
        t0 = time.perf_counter()
        ch.write(0, bytes(100_000))
        assert time.perf_counter() - t0 >= 0.09
    assert Throttle(None).bandwidth is None
