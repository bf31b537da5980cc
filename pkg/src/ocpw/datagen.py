"""Synthetic smooth fields, raw-file ingestion and domain decomposition."""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInput

N_MODES = 64


@dataclass(frozen=True)
class FieldSpec:
    """Recipe for a synthetic field.

    ``decay`` is the spectral decay exponent: mode amplitudes scale as
    ``|k| ** -decay``, so larger values give smoother, more compressible data.
    """

    name: str
    dims: tuple
    decay: float = 3.0
    value_range: tuple = (0.0, 1.0)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not 1 <= len(self.dims) <= 3 or any(d <= 0 for d in self.dims):
            raise InvalidInput(f"dims must be 1 to 3 positive integers, got {self.dims}")
        if self.decay < 0:
            raise InvalidInput("decay exponent must be >= 0")
        lo, hi = self.value_range
        if not hi > lo:
            raise InvalidInput("value_range must be increasing")


def gen_smooth_field(spec: FieldSpec) -> np.ndarray:
    """Sum of random cosine modes, rescaled to ``spec.value_range``.

    Wave-number magnitudes are log-uniform between 1 and the Nyquist limit
    with random directions; accumulation is in float64 and the result is
    rounded to ``spec.dtype`` once.
    """
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims
    kmax = np.array([max(1, d // 2) for d in dims], dtype=np.float64)
    mag = np.exp(rng.uniform(0.0, np.log(kmax.max()), N_MODES))
    direction = rng.normal(size=(N_MODES, len(dims)))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    k = np.clip(np.rint(direction * mag[:, None]), -kmax, kmax)
    k[np.all(k == 0, axis=1), 0] = 1
    phase = rng.uniform(0.0, 2.0 * np.pi, N_MODES)
    amp = np.linalg.norm(k, axis=1) ** -float(spec.decay)
    axes = [np.arange(d, dtype=np.float64) / d for d in dims]
    acc = np.zeros(dims, dtype=np.float64)
    for m in range(N_MODES):
        # cos(sum) as the real part of a separable product of exponentials.
        term = np.exp(1j * phase[m])
        for ax, x in enumerate(axes):
            shape = [1] * len(dims)
            shape[ax] = dims[ax]
            term = term * np.exp(2j * np.pi * k[m, ax] * x).reshape(shape)
        acc += amp[m] * term.real
    lo, hi = spec.value_range
    span = acc.max() - acc.min()
    if span > 0:
        acc = (acc - acc.min()) / span
    else:
        acc = np.zeros_like(acc)
    return (lo + (hi - lo) * acc).astype(spec.dtype)


@dataclass(frozen=True)
class BlockExtent:
    rank: int
    start: tuple
    stop: tuple

    @property
    def shape(self) -> tuple:
        return tuple(b - a for a, b in zip(self.start, self.stop))

    @property
    def slices(self) -> tuple:
        return tuple(slice(a, b) for a, b in zip(self.start, self.stop))


def _factorizations(n: int, parts: int):
    if parts == 1:
        yield (n,)
        return
    for d in range(1, n + 1):
        if n % d == 0:
            for rest in _factorizations(n // d, parts - 1):
                yield (d,) + rest


def process_grid(dims, ranks: int) -> tuple:
    """Most cube-like factorisation of ``ranks`` that fits inside ``dims``."""
    dims = tuple(int(d) for d in dims)
    if ranks < 1:
        raise InvalidInput("ranks must be >= 1")
    if ranks > math.prod(dims):
        raise InvalidInput(f"{ranks} ranks exceed {math.prod(dims)} cells")
    best = None
    for grid in _factorizations(ranks, len(dims)):
        if any(g > d for g, d in zip(grid, dims)):
            continue
        extents = [d / g for d, g in zip(dims, grid)]
        # Prefer cube-like blocks, then splitting leading axes first.
        key = (max(extents) / min(extents), tuple(-g for g in grid))
        if best is None or key < best[0]:
            best = (key, grid)
    if best is None:
        raise InvalidInput(f"cannot split {dims} into {ranks} blocks")
    return best[1]


def _splits(d: int, parts: int):
    base, extra = divmod(d, parts)
    edges = [0]
    for i in range(parts):
        edges.append(edges[-1] + base + (1 if i < extra else 0))
    return edges


def partition_domain(dims, ranks: int) -> list:
    """Per-rank block extents tiling ``dims`` (sizes differ by <= 1 per axis)."""
    grid = process_grid(dims, ranks)
    edges = [_splits(int(d), g) for d, g in zip(dims, grid)]
    out = []
    for rank, idx in enumerate(itertools.product(*(range(g) for g in grid))):
        start = tuple(edges[a][i] for a, i in enumerate(idx))
        stop = tuple(edges[a][i + 1] for a, i in enumerate(idx))
        out.append(BlockExtent(rank, start, stop))
    return out


def write_raw(path, values: np.ndarray):
    """Write a flat little-endian array plus its ``.fspec`` sidecar."""
    values = np.asarray(values)
    dtype = values.dtype.newbyteorder("<")
    Path(path).write_bytes(values.astype(dtype).tobytes())
    Path(str(path) + ".fspec").write_text(
        f"dims={'x'.join(str(d) for d in values.shape)}\ndtype={values.dtype.name}\n"
    )


def read_fspec(path) -> tuple:
    meta = {}
    sidecar = Path(str(path) + ".fspec")
    if not sidecar.is_file():
        raise InvalidInput(f"{path}: no dims given and no {sidecar.name} sidecar")
    for line in sidecar.read_text().splitlines():
        key, sep, val = line.partition("=")
        if sep:
            meta[key.strip()] = val.strip()
    try:
        dims = tuple(int(d) for d in meta["dims"].split("x"))
        return dims, meta["dtype"]
    except (KeyError, ValueError):
        raise InvalidInput(f"malformed sidecar for {path}") from None


def ingest_raw(path, dims=None, dtype=None) -> np.ndarray:
    """Load a flat little-endian array; dims/dtype default to the sidecar."""
    if dims is None or dtype is None:
        sdims, sdtype = read_fspec(path)
        dims = sdims if dims is None else dims
        dtype = sdtype if dtype is None else dtype
    dims = tuple(int(d) for d in dims)
    dt = np.dtype(dtype).newbyteorder("<")
    expected = math.prod(dims) * dt.itemsize
    actual = os.path.getsize(path)
    if actual != expected:
        raise InvalidInput(f"{path}: {actual} bytes, expected {expected} for {dims} {dt}")
    data = np.fromfile(path, dtype=dt).reshape(dims)
    return data.astype(dt.newbyteorder("="))
