import threading

import pytest

from ocpw import InvalidInput
from ocpw.collective import GroupAborted, ThreadGroup, run_group


def gather_rank_squares(rank, job, group):
    got = group.allgather(rank, job * job)
    group.barrier()
    return got


def fail_on_two(rank, job, group):
    if rank == 2:
        raise ValueError("rank two failed")
    group.barrier()
    return rank


def test_allgather_threads():
    out = run_group(gather_rank_squares, [1, 2, 3, 4])
    assert out == [[1, 4, 9, 16]] * 4


def test_repeated_allgathers_do_not_mix_rounds():
    def body(rank, job, group):
        return [group.allgather(rank, (i, rank)) for i in range(20)]

    out = run_group(body, [None] * 5)
    for rank_out in out:
        for i, row in enumerate(rank_out):
            assert row == [(i, r) for r in range(5)]


def test_failure_propagates_and_peers_unblock():
    with pytest.raises(ValueError, match="rank two"):
        run_group(fail_on_two, [None] * 4)


def test_timeout_aborts():
    g = ThreadGroup(2, timeout=0.05)
    with pytest.raises(GroupAborted):
        g.barrier()


def test_single_rank_runs_inline():
    assert run_group(lambda r, j, g: threading.current_thread().name, [0]) == [threading.main_thread().name]


def test_bad_arguments():
    with pytest.raises(InvalidInput):
        run_group(gather_rank_squares, [1], backend="mpi")
    with pytest.raises(InvalidInput):
        run_group(gather_rank_squares, [])


def test_process_backend():
    assert run_group(gather_rank_squares, [1, 2, 3], backend="process") == [[1, 4, 9]] * 3
    with pytest.raises(ValueError):
        run_group(fail_on_two, [None] * 3, backend="process")
