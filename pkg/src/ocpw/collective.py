"""Minimal collective layer for the rank harness: barrier and all-gather.

Ranks are either threads of this process or separate processes.  Both
group kinds expose the same two operations; a failing rank aborts the
barrier so its peers raise instead of hanging.
"""

from __future__ import annotations

import multiprocessing as mp
import threading
import traceback
from typing import Callable, Optional, Sequence

from .errors import InvalidInput, OCPWError

DEFAULT_TIMEOUT = 600.0
BACKENDS = ("thread", "process")


class GroupAborted(OCPWError):
    """A peer failed or timed out while this rank waited on a collective."""


class _Group:
    def __init__(self, size: int, barrier, slots, timeout: Optional[float]):
        self.size = size
        self._barrier = barrier
        self._slots = slots
        self.timeout = timeout

    def barrier(self):
        try:
            self._barrier.wait(self.timeout)
        except threading.BrokenBarrierError:
            raise GroupAborted("collective aborted by a peer rank") from None

    def allgather(self, rank: int, value) -> list:
        """Every rank contributes ``value``; all receive the list by rank."""
        self._slots[rank] = value
        self.barrier()
        out = list(self._slots)
        # Second barrier keeps a fast rank from overwriting a slot early.
        self.barrier()
        return out

    def abort(self):
        self._barrier.abort()


class ThreadGroup(_Group):
    def __init__(self, size: int, timeout: Optional[float] = DEFAULT_TIMEOUT):
        super().__init__(size, threading.Barrier(size), [None] * size, timeout)


def run_group(
    fn: Callable,
    jobs: Sequence,
    backend: str = "thread",
    timeout: Optional[float] = DEFAULT_TIMEOUT,
) -> list:
    """Run ``fn(rank, job, group)`` on every rank; return results by rank.

    The first exception raised by any rank is re-raised here after all
    ranks have stopped (peers see :class:`GroupAborted`).
    """
    if backend not in BACKENDS:
        raise InvalidInput(f"backend must be one of {BACKENDS}")
    size = len(jobs)
    if size < 1:
        raise InvalidInput("need at least one rank")
    if backend == "thread":
        return _run_threads(fn, jobs, timeout)
    return _run_processes(fn, jobs, timeout)


def _pick_error(errors):
    real = [e for e in errors if e is not None and not isinstance(e, GroupAborted)]
    if real:
        return real[0]
    return next((e for e in errors if e is not None), None)


def _run_threads(fn, jobs, timeout):
    size = len(jobs)
    group = ThreadGroup(size, timeout)
    results = [None] * size
    errors = [None] * size

    def body(rank):
        try:
            results[rank] = fn(rank, jobs[rank], group)
        except BaseException as exc:  # noqa: BLE001 - re-raised by the caller
            errors[rank] = exc
            group.abort()

    if size == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(r,), name=f"rank-{r}") for r in range(size)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    err = _pick_error(errors)
    if err is not None:
        raise err
    return results


def _process_body(fn, rank, job, barrier, slots, timeout, results):
    group = _Group(len(slots), barrier, slots, timeout)
    try:
        results[rank] = ("ok", fn(rank, job, group))
    except BaseException as exc:  # noqa: BLE001
        group.abort()
        try:
            results[rank] = ("error", exc)
        except Exception:
            results[rank] = ("error", OCPWError(traceback.format_exc()))


def _run_processes(fn, jobs, timeout):
    size = len(jobs)
    ctx = mp.get_context("spawn")
    with ctx.Manager() as manager:
        slots = manager.list([None] * size)
        results = manager.list([None] * size)
        barrier = ctx.Barrier(size)
        procs = [
            ctx.Process(
                target=_process_body,
                args=(fn, r, jobs[r], barrier, slots, timeout, results),
                name=f"rank-{r}",
            )
            for r in range(size)
        ]
        for p in procs:
            p.start()
        for p in procs:
            p.join()
        out = list(results)
    errors = []
    values = []
    for r, item in enumerate(out):
        if item is None:
            errors.append(OCPWError(f"rank {r} exited with code {procs[r].exitcode}"))
            values.append(None)
        elif item[0] == "error":
            errors.append(item[1])
            values.append(None)
        else:
            errors.append(None)
            values.append(item[1])
    err = _pick_error(errors)
    if err is not None:
        raise err
    return values
