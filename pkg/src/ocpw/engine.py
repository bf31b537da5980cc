"""Multi-rank compress-and-write pipeline over a shared container file.

Methods:

1. collective write of raw values (no compression);
2. compress every field, all-gather the actual sizes, then write at exact
   offsets after a barrier;
3. estimate sizes, all-gather, plan reserved regions, then compress while a
   per-rank writer thread drains finished blocks to their regions;
4. as 3, with the compression queue reordered by the greedy scheduler.

In methods 3/4 a block larger than its region writes its head in place at
once; the tails are placed after a second all-gather, in (rank, field)
order, past the end of the reserved regions.  Rank 0 writes the metadata
block and finally the completion flag.
"""

from __future__ import annotations

import csv
import io
import math
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import container as ct
from .codec import CompressedBlock, ErrorBoundConfig, FieldPartition, compress, decompress
from .collective import run_group
from .datagen import BlockExtent, FieldSpec, gen_smooth_field, partition_domain
from .errors import ConsistencyFault, DecodeError, InvalidInput
from .models import ThroughputModel, estimate_ratio
from .planner import (
    ALIGNMENT,
    ExtraSpacePolicy,
    LayoutPlan,
    OffsetMetadata,
    SizeEstimate,
    encode_metadata,
    exact_layout,
    plan_offsets,
)
from .scheduler import FieldTask, optimize_order

METHODS = (1, 2, 3, 4)
QUEUE_DEPTH = 2
# Only used to rank fields when no calibrated model is supplied.
DEFAULT_MODEL = ThroughputModel(c_min=101.7, c_max=240.6, a=-1.716, c_thr=400.0)


def _align(x: int) -> int:
    return -(-x // ALIGNMENT) * ALIGNMENT


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    """Named fields split over ranks: ``partitions[rank][field]``."""

    names: list
    configs: list
    partitions: list
    global_dims: Optional[list] = None
    extents: Optional[list] = None

    def __post_init__(self):
        if not self.partitions or not self.names:
            raise InvalidInput("dataset needs at least one rank and one field")
        if len(self.configs) != len(self.names):
            raise InvalidInput("one error-bound config per field is required")
        if len(set(self.names)) != len(self.names):
            raise InvalidInput("field names must be unique")
        for r, row in enumerate(self.partitions):
            if len(row) != len(self.names):
                raise InvalidInput(f"rank {r} holds {len(row)} fields, expected {len(self.names)}")

    @property
    def ranks(self) -> int:
        return len(self.partitions)

    @property
    def fields(self) -> int:
        return len(self.names)

    @property
    def raw_bytes(self) -> int:
        return sum(p.nbytes for row in self.partitions for p in row)

    @classmethod
    def from_globals(cls, arrays: Mapping, configs: Sequence[ErrorBoundConfig], ranks: int):
        """Split whole fields (all with the same shape) across ``ranks``."""
        names = list(arrays)
        shapes = {np.shape(arrays[n]) for n in names}
        if len(shapes) != 1:
            raise InvalidInput("all global fields must share one shape")
        dims = shapes.pop()
        extents = partition_domain(dims, ranks)
        parts = [
            [
                FieldPartition(n, e.rank, e.shape, np.ascontiguousarray(np.asarray(arrays[n])[e.slices]))
                for n in names
            ]
            for e in extents
        ]
        return cls(names, list(configs), parts, [tuple(dims)] * len(names), extents)

    @classmethod
    def synthetic(cls, specs: Sequence[FieldSpec], configs: Sequence[ErrorBoundConfig], ranks: int):
        return cls.from_globals({s.name: gen_smooth_field(s) for s in specs}, configs, ranks)

    def assemble(self, field_index: int, values: Optional[Sequence] = None) -> np.ndarray:
        """Rebuild a global field from per-rank blocks (own values by default)."""
        if self.extents is None or self.global_dims is None:
            raise InvalidInput("dataset has no global decomposition")
        blocks = values if values is not None else [row[field_index].values for row in self.partitions]
        out = np.empty(self.global_dims[field_index], dtype=np.asarray(blocks[0]).dtype)
        for e, b in zip(self.extents, blocks):
            out[e.slices] = np.asarray(b).reshape(e.shape)
        return out

    def descriptor(self, method: int, codec: str) -> dict:
        return {
            "method": method,
            "codec": codec,
            "fields": [
                {
                    "name": n,
                    "mode": c.mode,
                    "bound": c.bound,
                    "max_quant_codes": c.max_quant_codes,
                    "dtype": self.partitions[0][f].values.dtype.name,
                    "dims": [list(self.partitions[r][f].dims) for r in range(self.ranks)],
                    "global_dims": list(self.global_dims[f]) if self.global_dims else None,
                }
                for f, (n, c) in enumerate(zip(self.names, self.configs))
            ],
            "extents": [[list(e.start), list(e.stop)] for e in self.extents] if self.extents else None,
        }


# ---------------------------------------------------------------------------
# report types


@dataclass(frozen=True)
class OverflowRecord:
    rank: int
    field_index: int
    overflow_size: int
    overflow_offset: int


@dataclass
class RankTiming:
    """Per-rank phase times in seconds.

    ``compress_total`` is CPU time of the compressing thread, so ranks that
    share cores are not charged for each other's work; the rest is wall time.
    """

    rank: int
    estimate_time: float = 0.0
    optimize_time: float = 0.0
    compress_total: float = 0.0
    write_total: float = 0.0
    overlap_extra_write: float = 0.0
    overflow_time: float = 0.0
    wall: float = 0.0


@dataclass(frozen=True)
class EntryRecord:
    rank: int
    field_index: int
    field_name: str
    raw_size: int
    predicted_size: int
    reserved_size: int
    actual_size: int
    overflow_size: int

    @property
    def overflowed(self) -> bool:
        return self.overflow_size > 0


REPORT_COLUMNS = (
    "method",
    "rank",
    "field",
    "raw_size",
    "predicted_size",
    "reserved_size",
    "actual_size",
    "overflow_size",
    "compress_total",
    "write_total",
    "overlap_extra_write",
    "optimize_time",
    "overflow_time",
    "estimate_time",
    "wall_time",
)


@dataclass
class WriteReport:
    method: int
    path: str
    wall_time: float
    timings: list
    entries: list
    overflows: list
    file_size: int
    header_size: int
    r_space: Optional[float] = None
    order: dict = field(default_factory=dict)

    @property
    def raw_bytes(self) -> int:
        return sum(e.raw_size for e in self.entries)

    @property
    def compressed_bytes(self) -> int:
        return sum(e.actual_size for e in self.entries)

    @property
    def reserved_bytes(self) -> int:
        return sum(e.reserved_size for e in self.entries)

    @property
    def overflow_fraction(self) -> float:
        if not self.entries:
            return 0.0
        return sum(e.overflowed for e in self.entries) / len(self.entries)

    @property
    def wasted_bytes(self) -> int:
        """Reserved but unused bytes of partitions that fit their region."""
        return sum(e.reserved_size - e.actual_size for e in self.entries if not e.overflowed)

    @property
    def ratio_without_extra_space(self) -> float:
        return self.raw_bytes / self.compressed_bytes

    @property
    def ratio_with_extra_space(self) -> float:
        """Raw size over the bytes the data actually occupies in the file."""
        used = sum(max(e.reserved_size, e.actual_size - e.overflow_size) for e in self.entries)
        used += sum(_align(o.overflow_size) for o in self.overflows)
        return self.raw_bytes / used

    def breakdown(self) -> dict:
        """Slowest rank's phase times, the shape of a per-method bar chart."""
        keys = ("estimate_time", "optimize_time", "compress_total", "write_total",
                "overlap_extra_write", "overflow_time")
        out = {k: max(getattr(t, k) for t in self.timings) for k in keys}
        out["wall_time"] = self.wall_time
        return out

    def rows(self) -> list:
        tim = {t.rank: t for t in self.timings}
        rows = []
        for e in self.entries:
            t = tim[e.rank]
            rows.append(
                {
                    "method": self.method,
                    "rank": e.rank,
                    "field": e.field_name,
                    "raw_size": e.raw_size,
                    "predicted_size": e.predicted_size,
                    "reserved_size": e.reserved_size,
                    "actual_size": e.actual_size,
                    "overflow_size": e.overflow_size,
                    "compress_total": t.compress_total,
                    "write_total": t.write_total,
                    "overlap_extra_write": t.overlap_extra_write,
                    "optimize_time": t.optimize_time,
                    "overflow_time": t.overflow_time,
                    "estimate_time": t.estimate_time,
                    "wall_time": self.wall_time,
                }
            )
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow(row)
        return buf.getvalue()


# ---------------------------------------------------------------------------
# per-rank job


@dataclass
class _Job:
    method: int
    path: str
    header_size: int
    ranks: int
    fields: int
    partitions: list
    configs: list
    policy: Optional[ExtraSpacePolicy] = None
    model: Optional[ThroughputModel] = None
    sample_fraction: float = 0.05
    bandwidth: Optional[float] = None
    estimate_override: object = None
    on_write: Optional[Callable] = None
    queue_depth: int = QUEUE_DEPTH


@dataclass
class _RankResult:
    timing: RankTiming
    entries: list
    overflows: list
    order: tuple
    file_size: int = 0


def _override_size(override, rank: int, f: int) -> Optional[int]:
    if override is None:
        return None
    if callable(override):
        return int(override(rank, f))
    if isinstance(override, Mapping):
        return int(override[(rank, f)])
    return int(override)


def _estimate(job: _Job, rank: int) -> list:
    out = []
    for f, p in enumerate(job.partitions):
        size = _override_size(job.estimate_override, rank, f)
        if size is None:
            est = estimate_ratio(p, job.configs[f], job.sample_fraction)
            size, ratio = est.predicted_size, est.predicted_ratio
        else:
            ratio = p.nbytes / max(size, 1)
        out.append(SizeEstimate(rank, f, size, ratio))
    return out


def _check_plan(group, rank: int, plan: LayoutPlan):
    digests = group.allgather(rank, plan.digest())
    if len(set(digests)) != 1:
        raise ConsistencyFault("ranks computed different layout plans from the same gather")


def _finalize(f: ct.SharedFile, job: _Job, meta: list, end: int) -> int:
    blob = encode_metadata(meta)
    meta_off = _align(end)
    ct.finalize(f, meta_off, blob)
    return meta_off + len(blob)


def _rank_overlapped(rank: int, job: _Job, group) -> _RankResult:
    timing = RankTiming(rank)
    t_start = time.perf_counter()
    with ct.SharedFile(job.path, on_write=job.on_write) as f:
        chan = ct.WriteChannel(f, rank, job.bandwidth)

        t0 = time.perf_counter()
        mine = _estimate(job, rank)
        timing.estimate_time = time.perf_counter() - t0
        gathered = [e for part in group.allgather(rank, mine) for e in part]
        plan = plan_offsets(gathered, job.policy, job.header_size, job.ranks, job.fields)
        _check_plan(group, rank, plan)

        model = job.model or DEFAULT_MODEL
        tasks = []
        for est, p in zip(mine, job.partitions):
            B = max(8.0 * est.predicted_size / p.n, 1e-9)
            tasks.append(
                FieldTask(est.field_index, model.compression_time(B, p.n, p.b_ori), model.write_time(B, p.n))
            )
        t0 = time.perf_counter()
        if job.method == 4:
            tasks = list(optimize_order(tasks).order)
        timing.optimize_time = time.perf_counter() - t0
        order = tuple(t.field_index for t in tasks)

        # Compression feeds a bounded queue drained by this rank's writer.
        q: queue.Queue = queue.Queue(maxsize=job.queue_depth)
        actual = {}
        tails = {}
        writer_error = []

        def writer():
            try:
                while True:
                    item = q.get()
                    if item is None:
                        return
                    fi, payload = item
                    entry = plan.entry(rank, fi)
                    head = min(len(payload), entry.reserved_size)
                    timing.write_total += chan.write(entry.reserved_offset, memoryview(payload)[:head])
                    if head < len(payload):
                        tails[fi] = payload[head:]
            except BaseException as exc:  # noqa: BLE001
                writer_error.append(exc)
                # Keep draining so the compressor never blocks forever.
                while q.get() is not None:
                    pass

        wt = threading.Thread(target=writer, name=f"writer-{rank}")
        wt.start()
        try:
            for task in tasks:
                fi = task.field_index
                t0 = time.thread_time()
                block = compress(job.partitions[fi], job.configs[fi])
                timing.compress_total += time.thread_time() - t0
                actual[fi] = len(block.payload)
                q.put((fi, block.payload))
        finally:
            q.put(None)
            t_comp_done = time.perf_counter()
            wt.join()
        timing.overlap_extra_write = time.perf_counter() - t_comp_done
        if writer_error:
            raise writer_error[0]

        # Overflow phase: gather tail sizes, place them deterministically.
        mine_sizes = {fi: (actual[fi], len(tails.get(fi, b""))) for fi in range(job.fields)}
        all_sizes = group.allgather(rank, mine_sizes)
        offset = _align(plan.data_end)
        placed = {}
        for r in range(job.ranks):
            for fi in range(job.fields):
                size = all_sizes[r][fi][1]
                if size:
                    placed[(r, fi)] = offset
                    offset += _align(size)
        t0 = time.perf_counter()
        for fi, tail in sorted(tails.items()):
            chan.write(placed[(rank, fi)], tail)
        timing.overflow_time = time.perf_counter() - t0

        group.barrier()
        file_size = 0
        if rank == 0:
            meta = []
            for e in plan.entries:
                a, o = all_sizes[e.rank][e.field_index]
                meta.append(OffsetMetadata(e.reserved_offset, a, placed.get((e.rank, e.field_index), 0), o))
            file_size = _finalize(f, job, meta, offset)
        group.barrier()

    timing.wall = time.perf_counter() - t_start
    entries = []
    overflows = []
    for fi, p in enumerate(job.partitions):
        e = plan.entry(rank, fi)
        ov = len(tails.get(fi, b""))
        entries.append(EntryRecord(rank, fi, p.field_name, p.nbytes, e.predicted_size, e.reserved_size, actual[fi], ov))
        if ov:
            overflows.append(OverflowRecord(rank, fi, ov, placed[(rank, fi)]))
    return _RankResult(timing, entries, overflows, order, file_size)


def _rank_collective(rank: int, job: _Job, group) -> _RankResult:
    timing = RankTiming(rank)
    t_start = time.perf_counter()
    with ct.SharedFile(job.path, on_write=job.on_write) as f:
        chan = ct.WriteChannel(f, rank, job.bandwidth)
        payloads = {}
        if job.method == 1:
            for fi, p in enumerate(job.partitions):
                payloads[fi] = np.ascontiguousarray(p.values).astype(p.values.dtype.newbyteorder("<")).tobytes()
        else:
            for fi, p in enumerate(job.partitions):
                t0 = time.thread_time()
                payloads[fi] = compress(p, job.configs[fi]).payload
                timing.compress_total += time.thread_time() - t0
        sizes = {(rank, fi): len(b) for fi, b in payloads.items()}
        gathered = {}
        for part in group.allgather(rank, sizes):
            gathered.update(part)
        plan = exact_layout(gathered, job.header_size)
        _check_plan(group, rank, plan)
        group.barrier()
        for fi in range(job.fields):
            e = plan.entry(rank, fi)
            timing.write_total += chan.write(e.reserved_offset, payloads[fi])
        group.barrier()
        file_size = 0
        if rank == 0:
            meta = [OffsetMetadata(e.reserved_offset, e.reserved_size) for e in plan.entries]
            file_size = _finalize(f, job, meta, plan.data_end)
        group.barrier()
    timing.wall = time.perf_counter() - t_start
    entries = [
        EntryRecord(rank, fi, p.field_name, p.nbytes, len(payloads[fi]), len(payloads[fi]), len(payloads[fi]), 0)
        for fi, p in enumerate(job.partitions)
    ]
    return _RankResult(timing, entries, [], tuple(range(job.fields)), file_size)


def _rank_main(rank: int, job: _Job, group) -> _RankResult:
    if job.method in (3, 4):
        return _rank_overlapped(rank, job, group)
    return _rank_collective(rank, job, group)


# ---------------------------------------------------------------------------
# drivers


def run_method(
    dataset: Dataset,
    method: int,
    path,
    policy: Optional[ExtraSpacePolicy] = None,
    model: Optional[ThroughputModel] = None,
    sample_fraction: float = 0.05,
    write_bandwidth: Optional[float] = None,
    estimate_override=None,
    on_write: Optional[Callable] = None,
    backend: str = "thread",
    queue_depth: int = QUEUE_DEPTH,
) -> WriteReport:
    """Write ``dataset`` to a new container at ``path`` with method 1-4.

    ``write_bandwidth`` (bytes/s per rank) throttles each rank's writer to
    emulate a storage medium; ``estimate_override`` replaces the sampled size
    predictions (an int, a ``(rank, field) -> size`` mapping or callable).
    ``on_write(offset, size, rank)`` observes every positional write
    (thread backend only).
    """
    if method not in METHODS:
        raise InvalidInput(f"method must be one of {METHODS}")
    if not 0 < sample_fraction <= 1:
        raise InvalidInput("sample_fraction must lie in (0, 1]")
    if on_write is not None and backend != "thread":
        raise InvalidInput("write hooks need the thread backend")
    if method in (3, 4) and policy is None:
        policy = ExtraSpacePolicy()
    path = os.fspath(path)
    codec = "raw" if method == 1 else "ocb1"
    header = ct.header_bytes(dataset.fields, dataset.ranks, dataset.descriptor(method, codec))
    with ct.SharedFile(path, create=True, on_write=on_write) as f:
        f.pwrite(0, header)
    jobs = [
        _Job(
            method=method,
            path=path,
            header_size=len(header),
            ranks=dataset.ranks,
            fields=dataset.fields,
            partitions=dataset.partitions[r],
            configs=dataset.configs,
            policy=policy,
            model=model,
            sample_fraction=sample_fraction,
            bandwidth=write_bandwidth,
            estimate_override=estimate_override,
            on_write=on_write,
            queue_depth=queue_depth,
        )
        for r in range(dataset.ranks)
    ]
    t0 = time.perf_counter()
    try:
        results = run_group(_rank_main, jobs, backend)
    except BaseException:
        try:
            with ct.SharedFile(path) as f:
                ct.mark(f, ct.ABORTED)
        except OSError:
            pass
        raise
    wall = time.perf_counter() - t0
    return WriteReport(
        method=method,
        path=path,
        wall_time=wall,
        timings=[r.timing for r in results],
        entries=sorted((e for r in results for e in r.entries), key=lambda e: (e.field_index, e.rank)),
        overflows=sorted((o for r in results for o in r.overflows), key=lambda o: (o.rank, o.field_index)),
        file_size=results[0].file_size,
        header_size=len(header),
        r_space=policy.r_space if policy is not None else None,
        order={i: r.order for i, r in enumerate(results)},
    )


def run_overlapped_write(dataset: Dataset, path, policy=None, model=None, reorder: bool = True, **kw) -> WriteReport:
    return run_method(dataset, 4 if reorder else 3, path, policy=policy, model=model, **kw)


def run_baseline_write(dataset: Dataset, path, compress_first: bool = True, **kw) -> WriteReport:
    return run_method(dataset, 2 if compress_first else 1, path, **kw)


def reference_blocks(dataset: Dataset) -> list:
    """Standalone sequential compression of every partition, ``[rank][field]``."""
    return [[compress(p, c) for p, c in zip(row, dataset.configs)] for row in dataset.partitions]


# ---------------------------------------------------------------------------
# read side


@dataclass(frozen=True)
class EntryCheck:
    rank: int
    field_index: int
    field_name: str
    bound: float
    max_error: float
    violations: int


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.violations == 0 for c in self.checks)

    @property
    def violations(self) -> int:
        return sum(c.violations for c in self.checks)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "field", "bound", "max_error", "violations"])
        for c in self.checks:
            w.writerow([c.rank, c.field_name, repr(c.bound), repr(c.max_error), c.violations])
        return buf.getvalue()


@dataclass
class ReadResult:
    """Decoded ``values[rank][field]`` plus the container's own description."""

    container: ct.Container
    names: list
    values: list
    verification: Optional[VerificationReport] = None

    def assemble(self, field_index: int) -> np.ndarray:
        d = self.container.descriptor
        if not d.get("extents"):
            raise InvalidInput("container has no global decomposition")
        extents = [BlockExtent(r, tuple(a), tuple(b)) for r, (a, b) in enumerate(d["extents"])]
        gd = d["fields"][field_index]["global_dims"]
        blocks = [row[field_index] for row in self.values]
        out = np.empty(tuple(gd), dtype=blocks[0].dtype)
        for e, b in zip(extents, blocks):
            out[e.slices] = b
        return out


def read_and_verify(path, expected: Optional[Dataset] = None) -> ReadResult:
    """Decode every partition; with ``expected``, check the error bound."""
    c = ct.open_container(path)
    d = c.descriptor
    try:
        codec = d["codec"]
        fdesc = d["fields"]
    except (KeyError, TypeError):
        raise DecodeError("container descriptor lacks codec/fields") from None
    if len(fdesc) != c.field_count:
        raise DecodeError("descriptor field count does not match the header")
    if expected is not None and (expected.ranks, expected.fields) != (c.rank_count, c.field_count):
        raise InvalidInput("expected dataset shape differs from the container")
    names = [fd["name"] for fd in fdesc]
    values = [[None] * c.field_count for _ in range(c.rank_count)]
    report = VerificationReport() if expected is not None else None
    with ct.SharedFile(path) as f:
        for fi, fd in enumerate(fdesc):
            cfg = ErrorBoundConfig(fd["mode"], fd["bound"], fd["max_quant_codes"])
            for r in range(c.rank_count):
                dims = tuple(fd["dims"][r])
                try:
                    payload = c.read_entry(f, r, fi)
                    if codec == "raw":
                        dt = np.dtype(fd["dtype"]).newbyteorder("<")
                        if len(payload) != math.prod(dims) * dt.itemsize:
                            raise DecodeError("raw entry size does not match its dims")
                        v = np.frombuffer(payload, dtype=dt).astype(dt.newbyteorder("=")).reshape(dims)
                        bound = 0.0
                    else:
                        block = CompressedBlock.from_payload(payload)
                        v = decompress(block, cfg, dims, fd["name"], r).values
                        bound = block.bound
                except DecodeError as exc:
                    raise DecodeError(f"rank {r}, field {fd['name']!r}: {exc}") from None
                values[r][fi] = v
                if report is not None:
                    orig = expected.partitions[r][fi].values
                    err = np.abs(v.astype(np.float64) - orig.astype(np.float64))
                    report.checks.append(
                        EntryCheck(r, fi, fd["name"], bound, float(err.max()), int(np.count_nonzero(err > bound)))
                    )
    return ReadResult(c, names, values, report)

