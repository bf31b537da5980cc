"""Per-rank compression ordering.

A rank has one compressor and one writer.  Field ``l`` takes ``P_c(l)`` to
compress and ``P_w(l)`` to write; a write starts once its field is
compressed and the previous write is done.  The completion time of a queue
is therefore the two-machine flow-shop makespan, which the greedy insertion
heuristic tries to reduce.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .errors import InvalidInput, TooLargeInstance

BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True)
class FieldTask:
    field_index: int
    P_c: float
    P_w: float
    P_raw: Optional[float] = None

    def __post_init__(self):
        if not (self.P_c >= 0 and self.P_w >= 0):
            raise InvalidInput("task times must be non-negative")
        if self.P_raw is not None and not self.P_raw >= 0:
            raise InvalidInput("raw write time must be non-negative")


@dataclass(frozen=True)
class ScheduleQueue:
    order: tuple
    makespan: float

    @property
    def field_order(self) -> tuple:
        return tuple(t.field_index for t in self.order)


def time_of_queue(q: Sequence[FieldTask]) -> float:
    t_c = 0.0
    t_w = 0.0
    for task in q:
        t_c = t_c + task.P_c
        t_w = task.P_w + max(t_c, t_w)
    return t_w


def optimize_order(
    tasks: Sequence[FieldTask], trace: Optional[Callable] = None
) -> ScheduleQueue:
    """Greedy insertion: each field goes where the queue finishes soonest.

    Fields are taken in input order and tried at every position of the queue
    built so far.  Ties go to the later position, so a field is only moved
    ahead of earlier ones when that strictly helps (identical fields keep
    their input order).  ``trace(step, chosen,
    candidates)`` receives every candidate queue with its time, for tests.
    """
    queue: list = []
    for step, task in enumerate(tasks):
        best = None
        best_t = 0.0
        candidates = []
        for pos in range(len(queue) + 1):
            cand = queue[:pos] + [task] + queue[pos:]
            t = time_of_queue(cand)
            candidates.append((cand, t))
            if best is None or t <= best_t:
                best, best_t = cand, t
        queue = best
        if trace is not None:
            trace(step, (best, best_t), candidates)
    return ScheduleQueue(tuple(queue), time_of_queue(queue))


def johnson_order(tasks: Sequence[FieldTask]) -> ScheduleQueue:
    """Johnson's rule, optimal for the two-machine flow shop."""
    first = sorted(
        (t for t in tasks if t.P_c < t.P_w), key=lambda t: (t.P_c, t.field_index)
    )
    last = sorted(
        (t for t in tasks if t.P_c >= t.P_w), key=lambda t: (-t.P_w, t.field_index)
    )
    order = tuple(first + last)
    return ScheduleQueue(order, time_of_queue(order))


def brute_force_order(tasks: Sequence[FieldTask]) -> ScheduleQueue:
    tasks = list(tasks)
    if len(tasks) > BRUTE_FORCE_LIMIT:
        raise TooLargeInstance(f"brute force limited to {BRUTE_FORCE_LIMIT} tasks")
    best = None
    best_t = 0.0
    for perm in itertools.permutations(tasks):
        t = time_of_queue(perm)
        if best is None or t < best_t:
            best, best_t = perm, t
    return ScheduleQueue(tuple(best or ()), best_t)
