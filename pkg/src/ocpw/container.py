"""Shared container file: header, positional writes and the read side.

Layout (little-endian)::

    "OCPW" | version u16 | completion flag u8 | field_count u32
    | rank_count u32 | header_size u64 | metadata_offset u64
    | descriptor_len u32 | descriptor (UTF-8 JSON) | zero padding to 8 bytes
    | reserved data regions in plan order
    | overflow region
    | metadata block ("OCM1")

The completion flag is the last byte written by a successful run.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import DecodeError, InvalidInput
from .planner import ENTRY_DTYPE, META_HEADER, OffsetMetadata, decode_metadata

MAGIC = b"OCPW"
VERSION = 1
FIXED = struct.Struct("<4sHBIIQQ")
DESC_LEN = struct.Struct("<I")
FLAG_OFFSET = 6
METADATA_OFFSET_AT = 23

INCOMPLETE = 0
COMPLETE = 1
ABORTED = 2


def header_bytes(field_count: int, rank_count: int, descriptor: dict) -> bytes:
    """Serialized header with the completion flag clear and no metadata yet."""
    desc = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode()
    size = FIXED.size + DESC_LEN.size + len(desc)
    header_size = -(-size // 8) * 8
    head = FIXED.pack(MAGIC, VERSION, INCOMPLETE, field_count, rank_count, header_size, 0)
    return head + DESC_LEN.pack(len(desc)) + desc + b"\0" * (header_size - size)


class Throttle:
    """Caps the rate of one writer to ``bandwidth`` bytes per second.

    Stands in for a storage medium of known per-process throughput.
    """

    def __init__(self, bandwidth: Optional[float]):
        if bandwidth is not None and not bandwidth > 0:
            raise InvalidInput("bandwidth must be positive")
        self.bandwidth = bandwidth

    def pace(self, nbytes: int, started: float):
        if self.bandwidth is None:
            return
        wait = started + nbytes / self.bandwidth - time.perf_counter()
        if wait > 0:
            time.sleep(wait)


class SharedFile:
    """A file opened once per process and written with ``os.pwrite``.

    ``on_write(offset, size, rank)`` is invoked for every write; tests hook
    it to record byte ranges.
    """

    def __init__(self, path, create: bool = False, on_write: Optional[Callable] = None):
        self.path = os.fspath(path)
        flags = os.O_RDWR | (os.O_CREAT | os.O_TRUNC if create else 0)
        self.fd = os.open(self.path, flags, 0o644)
        self.on_write = on_write
        self._lock = threading.Lock()

    def pwrite(self, offset: int, data, rank: Optional[int] = None):
        view = memoryview(data).cast("B")
        if self.on_write is not None:
            with self._lock:
                self.on_write(offset, len(view), rank)
        done = 0
        while done < len(view):
            done += os.pwrite(self.fd, view[done:], offset + done)

    def pread(self, offset: int, size: int) -> bytes:
        out = os.pread(self.fd, size, offset)
        if len(out) != size:
            raise DecodeError(f"short read at offset {offset}: wanted {size}, got {len(out)}")
        return out

    def size(self) -> int:
        return os.fstat(self.fd).st_size

    def sync(self):
        os.fsync(self.fd)

    def close(self):
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class WriteChannel:
    """One rank's writer: positional writes paced by an optional throttle."""

    def __init__(self, file: SharedFile, rank: int, bandwidth: Optional[float] = None):
        self.file = file
        self.rank = rank
        self.throttle = Throttle(bandwidth)

    def write(self, offset: int, data) -> float:
        t0 = time.perf_counter()
        self.file.pwrite(offset, data, self.rank)
        self.throttle.pace(len(memoryview(data).cast("B")), t0)
        return time.perf_counter() - t0


def finalize(file: SharedFile, metadata_offset: int, metadata: bytes):
    """Write the metadata block, then its offset, then the completion flag."""
    file.pwrite(metadata_offset, metadata)
    file.pwrite(METADATA_OFFSET_AT, struct.pack("<Q", metadata_offset))
    file.pwrite(FLAG_OFFSET, bytes([COMPLETE]))


def mark(file: SharedFile, flag: int):
    file.pwrite(FLAG_OFFSET, bytes([flag]))


@dataclass
class Container:
    """Parsed view of a finished container."""

    path: str
    flag: int
    field_count: int
    rank_count: int
    header_size: int
    metadata_offset: int
    descriptor: dict
    metadata: list

    def entry_index(self, rank: int, field_index: int) -> int:
        return field_index * self.rank_count + rank

    def read_entry(self, file: SharedFile, rank: int, field_index: int) -> bytes:
        m: OffsetMetadata = self.metadata[self.entry_index(rank, field_index)]
        head = file.pread(m.reserved_offset, m.head_size)
        if m.overflow_size:
            return head + file.pread(m.overflow_offset, m.overflow_size)
        return head


def open_container(path) -> Container:
    with SharedFile(path) as f:
        size = f.size()
        if size < FIXED.size + DESC_LEN.size:
            raise DecodeError("file too small to be a container")
        magic, version, flag, fields, ranks, header_size, meta_off = FIXED.unpack(
            f.pread(0, FIXED.size)
        )
        if magic != MAGIC:
            raise DecodeError("bad container magic")
        if version != VERSION:
            raise DecodeError(f"unsupported container version {version}")
        if flag != COMPLETE:
            state = {INCOMPLETE: "incomplete (torn run)", ABORTED: "aborted"}.get(flag, "unknown")
            raise DecodeError(f"container is {state}")
        (dlen,) = DESC_LEN.unpack(f.pread(FIXED.size, DESC_LEN.size))
        if FIXED.size + DESC_LEN.size + dlen > header_size:
            raise DecodeError("descriptor overruns the header")
        try:
            descriptor = json.loads(f.pread(FIXED.size + DESC_LEN.size, dlen))
        except ValueError as exc:
            raise DecodeError(f"corrupt descriptor: {exc}") from None
        count = fields * ranks
        meta_len = META_HEADER.size + count * ENTRY_DTYPE.itemsize
        if meta_off + meta_len > size:
            raise DecodeError("metadata block extends past end of file")
        metadata = decode_metadata(f.pread(meta_off, meta_len))
        if len(metadata) != count:
            raise DecodeError("metadata entry count does not match fields x ranks")
        for m in metadata:
            if m.reserved_offset + m.head_size > size or m.overflow_offset + m.overflow_size > size:
                raise DecodeError("metadata entry points past end of file")
    return Container(
        os.fspath(path), flag, fields, ranks, header_size, meta_off, descriptor, metadata
    )
