"""Offset pre-computation for the shared file.

Every rank runs the same pure functions on the same gathered estimates, so
the resulting layout is byte-identical everywhere without further
communication.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DecodeError, IncompleteGather, InvalidInput

R_SPACE_MIN = 1.1
R_SPACE_MAX = 1.43
R_SPACE_DEFAULT = 1.25
HIGH_RATIO_THRESHOLD = 32.0
ALIGNMENT = 8

META_MAGIC = b"OCM1"
META_VERSION = 1
META_HEADER = struct.Struct("<4sHQ")
ENTRY_DTYPE = np.dtype(
    [
        ("reserved_offset", "<u8"),
        ("actual_size", "<u8"),
        ("overflow_offset", "<u8"),
        ("overflow_size", "<u8"),
    ]
)
OFFSET_BYTES = 8


@dataclass(frozen=True)
class ExtraSpacePolicy:
    r_space: float = R_SPACE_DEFAULT
    high_ratio_threshold: float = HIGH_RATIO_THRESHOLD

    def __post_init__(self):
        if not R_SPACE_MIN <= self.r_space <= R_SPACE_MAX:
            raise InvalidInput(
                f"r_space must lie in [{R_SPACE_MIN}, {R_SPACE_MAX}], got {self.r_space}"
            )
        if not self.high_ratio_threshold > 1:
            raise InvalidInput("high_ratio_threshold must exceed 1")


def effective_extra_ratio(policy: ExtraSpacePolicy, r_comp_est: float) -> float:
    """Per-partition space multiplier.

    Partitions predicted above the high-ratio threshold get a widened margin,
    ``min(2, 1 + 4 * (R_space - 1))``; the jump at the threshold is kept.
    """
    if not isinstance(policy, ExtraSpacePolicy):
        raise InvalidInput("policy must be an ExtraSpacePolicy")
    if not r_comp_est > 0:
        raise InvalidInput("estimated compression ratio must be positive")
    if r_comp_est > policy.high_ratio_threshold:
        return min(2.0, 1.0 + (policy.r_space - 1.0) * 4.0)
    return policy.r_space


@dataclass(frozen=True)
class SizeEstimate:
    """Gathered prediction for one (rank, field) partition."""

    rank: int
    field_index: int
    predicted_size: int
    predicted_ratio: float


@dataclass(frozen=True)
class PlanEntry:
    rank: int
    field_index: int
    reserved_offset: int
    reserved_size: int
    predicted_size: int

    @property
    def end(self) -> int:
        return self.reserved_offset + self.reserved_size


@dataclass(frozen=True)
class LayoutPlan:
    entries: tuple
    header_size: int
    total_reserved: int

    def entry(self, rank: int, field_index: int) -> PlanEntry:
        return self._index()[(rank, field_index)]

    def _index(self):
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {(e.rank, e.field_index): e for e in self.entries}
            object.__setattr__(self, "_idx", idx)
        return idx

    @property
    def data_end(self) -> int:
        """First byte after the reserved regions."""
        return self.total_reserved

    def to_bytes(self) -> bytes:
        arr = np.array(
            [
                (e.rank, e.field_index, e.reserved_offset, e.reserved_size, e.predicted_size)
                for e in self.entries
            ],
            dtype="<u8",
        ).reshape(-1, 5)
        return struct.pack("<QQ", self.header_size, self.total_reserved) + arr.tobytes()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _align(x: int, a: int) -> int:
    return -(-x // a) * a


def _normalize(estimates) -> dict:
    table = {}
    if isinstance(estimates, Mapping):
        items = [
            SizeEstimate(r, f, int(v), 0.0) if not isinstance(v, SizeEstimate) else v
            for (r, f), v in estimates.items()
        ]
    else:
        items = list(estimates)
    for est in items:
        key = (est.rank, est.field_index)
        if key in table:
            raise InvalidInput(f"duplicate estimate for {key}")
        if est.predicted_size < 0:
            raise InvalidInput("predicted sizes must be non-negative")
        table[key] = est
    return table


def _check_complete(table: dict, ranks: int | None, fields: int | None):
    if not table:
        return 0, 0
    ranks = ranks if ranks is not None else max(r for r, _ in table) + 1
    fields = fields if fields is not None else max(f for _, f in table) + 1
    for f in range(fields):
        for r in range(ranks):
            if (r, f) not in table:
                raise IncompleteGather(f"no estimate for rank {r}, field {f}")
    if len(table) != ranks * fields:
        raise IncompleteGather("estimates outside the rank x field grid")
    return ranks, fields


def plan_offsets(
    estimates,
    policy: ExtraSpacePolicy,
    header_size: int = 0,
    ranks: int | None = None,
    fields: int | None = None,
) -> LayoutPlan:
    """Reserve ``ceil(predicted * r_space)`` bytes per partition, 8-aligned.

    Entries are laid out in (field_index, rank) order starting at
    ``header_size``.  ``estimates`` is an iterable of :class:`SizeEstimate`
    or a mapping ``(rank, field) -> predicted_size``.
    """
    table = _normalize(estimates)
    ranks, fields = _check_complete(table, ranks, fields)
    offset = _align(header_size, ALIGNMENT)
    entries = []
    for f in range(fields):
        for r in range(ranks):
            est = table[(r, f)]
            if est.predicted_ratio > 0:
                ratio = effective_extra_ratio(policy, est.predicted_ratio)
            else:
                ratio = policy.r_space
            reserved = _align(math.ceil(est.predicted_size * ratio), ALIGNMENT)
            entries.append(PlanEntry(r, f, offset, reserved, est.predicted_size))
            offset += reserved
    return LayoutPlan(tuple(entries), header_size, offset)


def exact_layout(sizes: Mapping, header_size: int = 0) -> LayoutPlan:
    """Pack known sizes back to back with no extra space and no padding."""
    table = _normalize(sizes)
    ranks, fields = _check_complete(table, None, None)
    offset = header_size
    entries = []
    for f in range(fields):
        for r in range(ranks):
            size = table[(r, f)].predicted_size
            entries.append(PlanEntry(r, f, offset, size, size))
            offset += size
    return LayoutPlan(tuple(entries), header_size, offset)


@dataclass(frozen=True)
class OffsetMetadata:
    """Final location record of one partition in the container."""

    reserved_offset: int
    actual_size: int
    overflow_offset: int = 0
    overflow_size: int = 0

    def __post_init__(self):
        if (self.overflow_offset == 0) != (self.overflow_size == 0):
            raise InvalidInput("overflow offset and size must both be zero or both be set")
        if self.overflow_size > self.actual_size:
            raise InvalidInput("overflow larger than the block itself")

    @property
    def head_size(self) -> int:
        return self.actual_size - self.overflow_size


def encode_metadata(meta: Iterable[OffsetMetadata]) -> bytes:
    meta = list(meta)
    arr = np.array(
        [(m.reserved_offset, m.actual_size, m.overflow_offset, m.overflow_size) for m in meta],
        dtype=ENTRY_DTYPE,
    )
    return META_HEADER.pack(META_MAGIC, META_VERSION, len(meta)) + arr.tobytes()


def decode_metadata(data: bytes) -> list:
    data = bytes(data)
    if len(data) < META_HEADER.size:
        raise DecodeError("metadata block shorter than its header")
    magic, version, count = META_HEADER.unpack_from(data, 0)
    if magic != META_MAGIC:
        raise DecodeError("bad metadata magic")
    if version != META_VERSION:
        raise DecodeError(f"unsupported metadata version {version}")
    if len(data) != META_HEADER.size + count * ENTRY_DTYPE.itemsize:
        raise DecodeError("metadata length does not match its entry count")
    arr = np.frombuffer(data, dtype=ENTRY_DTYPE, count=count, offset=META_HEADER.size)
    try:
        return [OffsetMetadata(*(int(x) for x in row)) for row in arr]
    except InvalidInput as exc:
        raise DecodeError(f"inconsistent metadata entry: {exc}") from None


def encode_offsets(meta: Sequence[OffsetMetadata]) -> bytes:
    """Offsets-only projection: one u64 reserved offset per entry."""
    return np.array([m.reserved_offset for m in meta], dtype="<u8").tobytes()


def offsets_metadata_size(ranks: int, fields: int) -> int:
    return ranks * fields * OFFSET_BYTES
