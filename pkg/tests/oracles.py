"""Straight-line reference implementations used as test oracles.

Written independently of the package: scalar math only, no shared helpers.
"""

import itertools
import math


def throughput(c_min, c_max, a, B, pivot=3.0):
    s = (c_max - c_min) * math.pow(B / pivot, a) + c_min
    if s < c_min:
        return c_min
    if s > c_max:
        return c_max
    return s


def compression_time(c_min, c_max, a, B, n, b_ori=32, pivot=3.0):
    return (b_ori * n / 8.0) / (throughput(c_min, c_max, a, B, pivot) * 1e6)


def write_time(B, n, c_thr):
    return (B * n / 8.0) / (c_thr * 1e6)


def extra_ratio(r_space, r_comp):
    if r_comp > 32:
        return min(2.0, 1.0 + (r_space - 1.0) * 4.0)
    return r_space


def lorenzo(values, dims, index):
    """First-order Lorenzo with zero boundary, written out per dimension."""

    def at(*idx):
        if any(i < 0 for i in idx):
            return 0.0
        flat = 0
        for i, d in zip(idx, dims):
            flat = flat * d + i
        return float(values[flat])

    if len(dims) == 1:
        (i,) = index
        return at(i - 1)
    if len(dims) == 2:
        i, j = index
        return at(i - 1, j) + at(i, j - 1) - at(i - 1, j - 1)
    i, j, k = index
    return (
        at(i - 1, j, k) + at(i, j - 1, k) + at(i, j, k - 1)
        - at(i - 1, j - 1, k) - at(i - 1, j, k - 1) - at(i, j - 1, k - 1)
        + at(i - 1, j - 1, k - 1)
    )


def makespan(pairs):
    """Time recurrence over (P_c, P_w) pairs."""
    t_c = 0.0
    t_w = 0.0
    for pc, pw in pairs:
        t_c += pc
        t_w = pw + max(t_c, t_w)
    return t_w


def optimal_makespan(pairs):
    return min(makespan(p) for p in itertools.permutations(pairs))
