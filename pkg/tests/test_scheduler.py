import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ocpw import (
    FieldTask,
    InvalidInput,
    TooLargeInstance,
    brute_force_order,
    johnson_order,
    optimize_order,
    time_of_queue,
)

from . import oracles

A = FieldTask(0, 4.0, 1.0)
B = FieldTask(1, 1.0, 4.0)

# Multiples of 1/64 keep every partial sum exact, so makespans compare with ==.
dyadic = st.integers(0, 6400).map(lambda k: k / 64)
task_lists = st.lists(st.tuples(dyadic, dyadic), min_size=0, max_size=7).map(
    lambda ps: [FieldTask(i, c, w) for i, (c, w) in enumerate(ps)]
)


def test_time_examples():
    assert time_of_queue([]) == 0
    assert time_of_queue([A, B]) == 9
    assert time_of_queue([B, A]) == 6
    assert time_of_queue([FieldTask(0, 2.5, 3.25)]) == 5.75


def test_greedy_two_task_example():
    q = optimize_order([A, B])
    assert q.field_order == (1, 0) and q.makespan == 6


def test_johnson_two_task_example():
    q = johnson_order([A, B])
    assert q.field_order == (1, 0) and q.makespan == 6


def test_identical_tasks_keep_input_order():
    tasks = [FieldTask(i, 2.0, 3.0) for i in range(5)]
    q = optimize_order(tasks)
    assert q.field_order == (0, 1, 2, 3, 4)
    assert q.makespan == 2.0 + 5 * 3.0 == time_of_queue(tasks)


def test_zero_writes():
    tasks = [FieldTask(i, float(i + 1), 0.0) for i in range(4)]
    assert johnson_order(tasks).makespan == sum(t.P_c for t in tasks)


def test_task_validation():
    with pytest.raises(InvalidInput):
        FieldTask(0, -1.0, 1.0)
    with pytest.raises(InvalidInput):
        FieldTask(0, 1.0, 1.0, -2.0)


def test_brute_force_limit():
    with pytest.raises(TooLargeInstance):
        brute_force_order([FieldTask(i, 1, 1) for i in range(9)])


@given(task_lists)
def test_recurrence_matches_oracle(tasks):
    assert time_of_queue(tasks) == oracles.makespan([(t.P_c, t.P_w) for t in tasks])


@given(task_lists)
def test_lower_bounds(tasks):
    t = time_of_queue(tasks)
    assert t >= sum(x.P_c for x in tasks) + (tasks[-1].P_w if tasks else 0) - 1e-9
    assert t >= sum(x.P_w for x in tasks) + (tasks[0].P_c if tasks else 0) - 1e-9
    assert t <= sum(x.P_c + x.P_w for x in tasks) + 1e-9


@given(task_lists)
def test_greedy_is_a_permutation(tasks):
    q = optimize_order(tasks)
    assert sorted(q.field_order) == list(range(len(tasks)))
    assert q.makespan == time_of_queue(q.order)


@given(task_lists)
def test_greedy_step_never_worse_than_appending(tasks):
    steps = []
    optimize_order(tasks, trace=lambda s, chosen, cands: steps.append((chosen, cands)))
    for (queue, t), cands in steps:
        assert t == min(c[1] for c in cands)
        assert t <= cands[-1][1]
        # ties resolve to the latest position
        assert queue == [c[0] for c in cands if c[1] == t][-1]


@given(task_lists)
def test_johnson_equals_brute_force(tasks):
    assert johnson_order(tasks).makespan == brute_force_order(tasks).makespan
    if tasks:
        assert brute_force_order(tasks).makespan == oracles.optimal_makespan([(t.P_c, t.P_w) for t in tasks])


def test_greedy_gap_small_on_random_instances():
    rng = np.random.default_rng(7)
    ratios = []
    for _ in range(200):
        n = int(rng.integers(3, 8))
        tasks = [FieldTask(i, *(10 ** rng.uniform(0, 3, 2))) for i in range(n)]
        ratios.append(optimize_order(tasks).makespan / johnson_order(tasks).makespan)
    assert min(ratios) >= 1 - 1e-12
    assert np.mean(ratios) <= 1.05
    assert math.isfinite(max(ratios))
