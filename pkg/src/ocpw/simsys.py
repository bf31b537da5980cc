"""Discrete-event simulation of the four write methods.

1. collective write of raw data;
2. compress everything, synchronise, then collective write;
3. per-rank compression overlapped with independent writes;
4. as 3, with each rank's queue reordered by :func:`optimize_order`.

Each rank owns one compressor and one writer.  Collective writes start
after a global barrier and then run concurrently on every rank at the
per-rank write rate scaled by ``collective_efficiency``.
"""

from __future__ import annotations

import csv
import heapq
import io
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInput
from .models import MB, ThroughputModel
from .scheduler import FieldTask, optimize_order

METHODS = (1, 2, 3, 4)
METHOD_NAMES = {
    1: "collective-no-compression",
    2: "compress-then-collective",
    3: "overlap",
    4: "overlap+reorder",
}


@dataclass
class SimWorkload:
    """Per-rank task lists plus the collective cost model.

    ``sync_cost`` is charged once per collective event (all-gather or
    barrier); ``collective_efficiency`` scales write throughput inside a
    collective write (1.0 means as fast as an independent write).
    """

    tasks: list
    sync_cost: float = 0.0
    collective_efficiency: float = 1.0

    def __post_init__(self):
        if len(self.tasks) < 1:
            raise InvalidInput("workload needs at least one rank")
        self.tasks = [list(ts) for ts in self.tasks]
        if self.sync_cost < 0:
            raise InvalidInput("sync_cost must be non-negative")
        if not self.collective_efficiency > 0:
            raise InvalidInput("collective_efficiency must be positive")

    @property
    def ranks(self) -> int:
        return len(self.tasks)


@dataclass(frozen=True)
class Event:
    rank: int
    kind: str
    task: int
    start: float
    end: float


@dataclass
class Timeline:
    events: list = field(default_factory=list)

    @property
    def makespan(self) -> float:
        return max((e.end for e in self.events), default=0.0)

    def for_rank(self, rank: int) -> list:
        return [e for e in self.events if e.rank == rank]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "kind", "task", "start", "end"])
        for e in sorted(self.events, key=lambda e: (e.rank, e.start, e.end, e.kind)):
            w.writerow([e.rank, e.kind, e.task, repr(e.start), repr(e.end)])
        return buf.getvalue()


class _EventLoop:
    def __init__(self):
        self.now = 0.0
        self._heap = []
        self._seq = itertools.count()

    def at(self, time: float, callback, *args):
        heapq.heappush(self._heap, (time, next(self._seq), callback, args))

    def run(self):
        while self._heap:
            self.now, _, cb, args = heapq.heappop(self._heap)
            cb(*args)


class _Rank:
    """One compressor feeding one FIFO writer."""

    def __init__(self, loop, timeline, rank, tasks, write_time, on_done=None):
        self.loop = loop
        self.timeline = timeline
        self.rank = rank
        self.tasks = list(tasks)
        self.write_time = write_time
        self.on_done = on_done
        self.ready = deque()
        self.writer_busy = False
        self.written = 0

    def start_compress(self, i=0):
        if i >= len(self.tasks):
            return
        t = self.tasks[i]
        self.loop.at(self.loop.now + t.P_c, self._compressed, i, self.loop.now)

    def _compressed(self, i, start):
        t = self.tasks[i]
        self.timeline.events.append(Event(self.rank, "compress", t.field_index, start, self.loop.now))
        self.enqueue_write(i)
        self.start_compress(i + 1)

    def enqueue_write(self, i):
        self.ready.append(i)
        if not self.writer_busy:
            self._next_write()

    def _next_write(self):
        if not self.ready:
            self.writer_busy = False
            return
        self.writer_busy = True
        i = self.ready.popleft()
        dur = self.write_time(self.tasks[i])
        self.loop.at(self.loop.now + dur, self._written, i, self.loop.now)

    def _written(self, i, start):
        self.timeline.events.append(
            Event(self.rank, "write", self.tasks[i].field_index, start, self.loop.now)
        )
        self.written += 1
        self._next_write()
        if self.written == len(self.tasks) and self.on_done is not None:
            self.on_done(self.rank)


def _sync(timeline, loop, ranks, cost, then):
    start = loop.now
    for r in range(ranks):
        timeline.events.append(Event(r, "sync", -1, start, start + cost))
    loop.at(start + cost, then)


def _raw_time(t: FieldTask) -> float:
    if t.P_raw is None:
        raise InvalidInput("method 1 needs raw write times (P_raw) on every task")
    return t.P_raw


def simulate(workload: SimWorkload, method: int) -> Timeline:
    if method not in METHODS:
        raise InvalidInput(f"method must be one of {METHODS}")
    loop = _EventLoop()
    tl = Timeline()
    R = workload.ranks
    c = workload.sync_cost
    eff = workload.collective_efficiency

    if method in (1, 2):
        if method == 1:
            wt = lambda t: _raw_time(t) / eff
        else:
            wt = lambda t: t.P_w / eff
        ranks = [_Rank(loop, tl, r, workload.tasks[r], wt) for r in range(R)]

        def collective_write():
            for rk in ranks:
                for i in range(len(rk.tasks)):
                    rk.enqueue_write(i)

        if method == 1:
            loop.at(0.0, _sync, tl, loop, R, c, collective_write)
        else:
            pending = {"n": sum(1 for ts in workload.tasks if ts)}

            def rank_compressed(rank):
                pending["n"] -= 1
                if pending["n"] == 0:
                    _sync(tl, loop, R, c, collective_write)

            for rk in ranks:
                n = len(rk.tasks)
                if n == 0:
                    continue
                # Compress only; writes are released by the barrier.
                rk.enqueue_write = _counting_sink(rk, n, rank_compressed)
                loop.at(0.0, rk.start_compress)
            if pending["n"] == 0:
                loop.at(0.0, _sync, tl, loop, R, c, lambda: None)
        loop.run()
        return tl

    orders = []
    for ts in workload.tasks:
        orders.append(list(optimize_order(ts).order) if method == 4 else list(ts))
    ranks = []
    done = {"n": sum(1 for o in orders if o)}

    def rank_done(rank):
        done["n"] -= 1
        if done["n"] == 0:
            _sync(tl, loop, R, c, lambda: None)

    for r in range(R):
        ranks.append(_Rank(loop, tl, r, orders[r], lambda t: t.P_w, rank_done))

    def launch():
        for rk in ranks:
            rk.start_compress()
        if done["n"] == 0:
            _sync(tl, loop, R, c, lambda: None)

    loop.at(0.0, _sync, tl, loop, R, c, launch)
    loop.run()
    return tl


def _counting_sink(rank: _Rank, n: int, callback):
    seen = {"k": 0}
    original = _Rank.enqueue_write.__get__(rank)

    def sink(i):
        seen["k"] += 1
        if seen["k"] == n:
            rank.enqueue_write = original
            callback(rank.rank)

    return sink


def compare_methods(workload: SimWorkload) -> list:
    """Makespan and speedups of every method (method 1 needs P_raw)."""
    spans = {}
    for m in METHODS:
        try:
            spans[m] = simulate(workload, m).makespan
        except InvalidInput:
            if m != 1:
                raise
            spans[m] = math.nan
    rows = []
    for m in METHODS:
        row = {"method": m, "name": METHOD_NAMES[m], "makespan": spans[m]}
        for base in (1, 2, 3):
            row[f"speedup_over_{base}"] = _ratio(spans[base], spans[m])
        rows.append(row)
    return rows


def _ratio(a, b):
    if math.isnan(a) or math.isnan(b):
        return math.nan
    if b == 0:
        return math.inf if a > 0 else 1.0
    return a / b


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# workload I/O and builders


def read_workload_csv(text: str, **kwargs) -> SimWorkload:
    """Parse ``[rank,]field,P_c,P_w[,P_raw]`` rows (no rank column: rank 0)."""
    reader = csv.DictReader(io.StringIO(text))
    need = {"field", "P_c", "P_w"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise InvalidInput("workload CSV needs columns field,P_c,P_w")
    per_rank = {}
    for row in reader:
        raw = row.get("P_raw")
        try:
            task = FieldTask(
                int(row["field"]),
                float(row["P_c"]),
                float(row["P_w"]),
                float(raw) if raw not in (None, "") else None,
            )
        except (TypeError, ValueError) as exc:
            raise InvalidInput(f"bad workload row {row}: {exc}") from None
        try:
            rank = int(row.get("rank") or 0)
        except ValueError:
            raise InvalidInput(f"bad rank in workload row {row}") from None
        per_rank.setdefault(rank, []).append(task)
    if not per_rank:
        raise InvalidInput("workload CSV has no rows")
    R = max(per_rank) + 1
    return SimWorkload([per_rank.get(r, []) for r in range(R)], **kwargs)


def workload_to_csv(w: SimWorkload) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["rank", "field", "P_c", "P_w", "P_raw"])
    for r, ts in enumerate(w.tasks):
        for t in ts:
            out.writerow([r, t.field_index, repr(t.P_c), repr(t.P_w), "" if t.P_raw is None else repr(t.P_raw)])
    return buf.getvalue()


def workload_from_model(
    model: ThroughputModel,
    ranks: int,
    bitrates: Sequence[float],
    n: int,
    b_ori: int = 32,
    jitter: float = 0.0,
    seed: int = 0,
    **kwargs,
) -> SimWorkload:
    """Model-predicted task times for ``ranks`` ranks sharing a field mix.

    Each rank's bit-rates are the given ones times a log-normal factor of
    spread ``jitter`` (0 keeps every rank identical).
    """
    rng = np.random.default_rng(seed)
    base = np.asarray(bitrates, dtype=np.float64)
    raw_time = b_ori * n / 8.0 / (model.c_thr * MB)
    tasks = []
    for _ in range(ranks):
        B = base * (np.exp(rng.normal(0.0, jitter, base.size)) if jitter else 1.0)
        B = np.minimum(B, b_ori)
        tasks.append(
            [
                FieldTask(
                    f,
                    model.compression_time(float(b), n, b_ori),
                    model.write_time(float(b), n),
                    raw_time,
                )
                for f, b in enumerate(B)
            ]
        )
    return SimWorkload(tasks, **kwargs)


# Compression-throughput constants from an offline calibration on 512^3 cosmology data.
REFERENCE_MODEL = ThroughputModel(c_min=101.7, c_max=240.6, a=-1.716)
# Nine fields per rank at an overall ratio near 16 (mean bit-rate 2).
REFERENCE_BITRATES = (1.0, 1.4, 1.8, 2.2, 2.6, 3.0, 1.2, 2.0, 2.8)
REFERENCE_POINTS = 256**3
REFERENCE_COLLECTIVE_EFFICIENCY = 0.5


def large_scale_workload(ranks: int = 4096, seed: int = 0, jitter: float = 0.15) -> SimWorkload:
    """Weak-scaling scenario: 256^3 float32 points per field per rank.

    Write throughput is chosen so a rank's total write time equals its total
    compression time (the balanced regime); collective writes run at half
    the independent per-process rate.
    """
    n = REFERENCE_POINTS
    comp = sum(REFERENCE_MODEL.compression_time(b, n) for b in REFERENCE_BITRATES)
    comp_bytes = sum(b * n / 8.0 for b in REFERENCE_BITRATES)
    model = REFERENCE_MODEL.with_write_throughput(comp_bytes / comp / MB)
    return workload_from_model(
        model,
        ranks,
        REFERENCE_BITRATES,
        n,
        jitter=jitter,
        seed=seed,
        collective_efficiency=REFERENCE_COLLECTIVE_EFFICIENCY,
    )
