"""Throughput, write-time and compression-ratio models.

Compression throughput follows a clamped power law in the compressed
bit-rate ``B``::

    S(B) = clamp((C_max - C_min) * (B / pivot) ** a + C_min, C_min, C_max)

with ``a < 0``.  Throughputs are in MB/s where 1 MB is 1e6 bytes, always
measured against the uncompressed size.  Write time is the compressed size
over a stable per-process write throughput ``C_thr``.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from . import _kernels
from .codec import (
    FIXED_OVERHEAD,
    CompressedBlock,
    ErrorBoundConfig,
    FieldPartition,
    _as_partition,
    _check_finite,
    _huffman_bits,
    _quantize,
    _shape3,
    compress,
)
from .errors import InvalidInput, TooFewSamples

MB = 1e6
DEFAULT_PIVOT = 3.0
MODEL_KEYS = ("c_min", "c_max", "a", "c_thr", "pivot")


@dataclass(frozen=True)
class ThroughputModel:
    """Calibrated compression and write throughput parameters (MB/s)."""

    c_min: float
    c_max: float
    a: float
    c_thr: float = 1.0
    pivot: float = DEFAULT_PIVOT
    degenerate: bool = False

    def __post_init__(self):
        if not self.c_min > 0:
            raise InvalidInput("c_min must be positive")
        if self.degenerate:
            if self.c_max < self.c_min:
                raise InvalidInput("c_max below c_min")
        elif not self.c_min < self.c_max:
            raise InvalidInput("c_min must be below c_max")
        if not self.a < 0:
            raise InvalidInput("a must be negative")
        if not self.c_thr > 0:
            raise InvalidInput("c_thr must be positive")
        if not self.pivot > 0:
            raise InvalidInput("pivot must be positive")

    def throughput(self, B):
        """Predicted compression throughput in MB/s at bit-rate ``B``."""
        B = np.asarray(B, dtype=np.float64)
        if np.any(B <= 0):
            raise InvalidInput("bit-rate must be positive")
        s = (self.c_max - self.c_min) * (B / self.pivot) ** self.a + self.c_min
        s = np.clip(s, self.c_min, self.c_max)
        return float(s) if s.ndim == 0 else s

    def compression_time(self, B, n, b_ori=32):
        return predict_compression_time(self, B, n, b_ori)

    def write_time(self, B, n):
        return predict_write_time(B, n, self.c_thr)

    def with_write_throughput(self, c_thr: float) -> "ThroughputModel":
        return replace(self, c_thr=float(c_thr))

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in MODEL_KEYS)

    @classmethod
    def from_text(cls, text: str) -> "ThroughputModel":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise InvalidInput(f"malformed model line {line!r}")
            values[key.strip()] = float(val)
        missing = [k for k in MODEL_KEYS if k not in values]
        if missing:
            raise InvalidInput(f"model file lacks keys {missing}")
        return cls(
            **{k: values[k] for k in MODEL_KEYS},
            degenerate=values["c_min"] == values["c_max"],
        )

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "ThroughputModel":
        with open(path) as fh:
            return cls.from_text(fh.read())


def _positive(name, x):
    if not (np.all(np.asarray(x) > 0)):
        raise InvalidInput(f"{name} must be positive")


def predict_compression_time(m: ThroughputModel, B, n, b_ori=32):
    """Seconds to compress ``n`` values of ``b_ori`` bits at bit-rate ``B``."""
    _positive("bit-rate", B)
    _positive("n", n)
    raw_bytes = np.asarray(b_ori, dtype=np.float64) * n / 8.0
    t = raw_bytes / (m.throughput(B) * MB)
    return float(t) if np.ndim(t) == 0 else t


def predict_write_time(B, n, c_thr):
    """Seconds to write ``n`` values stored at ``B`` bits each."""
    _positive("bit-rate", B)
    _positive("n", n)
    _positive("c_thr", c_thr)
    t = np.asarray(B, dtype=np.float64) * n / 8.0 / (np.asarray(c_thr) * MB)
    return float(t) if np.ndim(t) == 0 else t


# ---------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class CalibrationSample:
    bitrate: float
    throughput: float

    def __post_init__(self):
        if not (self.bitrate > 0 and self.throughput > 0):
            raise InvalidInput("calibration samples must be positive")


def write_calibration(samples: Iterable[CalibrationSample], path):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(f"B {s.bitrate!r} S_MBps {s.throughput!r}\n")


def read_calibration(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 4 or parts[0] != "B" or parts[2] != "S_MBps":
                raise InvalidInput(f"{path}:{lineno}: expected 'B <float> S_MBps <float>'")
            out.append(CalibrationSample(float(parts[1]), float(parts[3])))
    return out


class ThroughputRegressor(RegressorMixin, BaseEstimator):
    """Fits the clamped power law to (bit-rate, throughput) measurements.

    ``C_min``/``C_max`` are the smallest and largest observed throughputs;
    the exponent minimises squared log-throughput residuals over
    ``a_bounds``.  Degenerate inputs (all throughputs equal) produce a flat
    model with ``a = -1`` and ``degenerate_ = True``.
    """

    def __init__(self, pivot=DEFAULT_PIVOT, a_bounds=(-20.0, -1e-3), min_span=4.0):
        self.pivot = pivot
        self.a_bounds = a_bounds
        self.min_span = min_span

    def fit(self, X, y):
        X, y = check_X_y(np.asarray(X, dtype=np.float64).reshape(-1, 1), y, y_numeric=True)
        B = X[:, 0]
        if np.any(B <= 0) or np.any(y <= 0):
            raise InvalidInput("bit-rates and throughputs must be positive")
        if len(np.unique(np.column_stack([B, y]), axis=0)) < 3:
            raise TooFewSamples("need at least 3 distinct calibration samples")
        if B.max() / B.min() < self.min_span:
            raise TooFewSamples(
                f"calibration bit-rates span {B.max() / B.min():.2f}x, need {self.min_span}x"
            )
        self.c_min_ = float(y.min())
        self.c_max_ = float(y.max())
        self.n_features_in_ = 1
        if self.c_min_ == self.c_max_:
            warnings.warn("all calibration throughputs equal; using a flat model")
            self.a_ = -1.0
            self.degenerate_ = True
            return self
        self.degenerate_ = False
        log_y = np.log(y)
        span = self.c_max_ - self.c_min_

        def loss(a):
            s = np.clip(span * (B / self.pivot) ** a + self.c_min_, self.c_min_, self.c_max_)
            return float(np.sum((np.log(s) - log_y) ** 2))

        lo, hi = self.a_bounds
        grid = -np.geomspace(-hi, -lo, 200)
        best = grid[int(np.argmin([loss(a) for a in grid]))]
        k = int(np.searchsorted(-grid, -best))
        bracket = (grid[min(k + 1, len(grid) - 1)], grid[max(k - 1, 0)])
        res = minimize_scalar(
            loss, bounds=bracket, method="bounded", options={"xatol": 1e-10}
        )
        self.a_ = float(res.x) if res.fun <= loss(best) else float(best)
        self.loss_ = min(float(res.fun), loss(best))
        return self

    def predict(self, X):
        check_is_fitted(self, "a_")
        B = check_array(np.asarray(X, dtype=np.float64).reshape(-1, 1))[:, 0]
        return self.to_model().throughput(B)

    def to_model(self, c_thr: float = 1.0) -> ThroughputModel:
        check_is_fitted(self, "a_")
        return ThroughputModel(
            self.c_min_, self.c_max_, self.a_, c_thr, self.pivot, self.degenerate_
        )


def fit_throughput_model(
    samples: Sequence[CalibrationSample], c_thr: float = 1.0, pivot: float = DEFAULT_PIVOT
) -> ThroughputModel:
    samples = list(samples)
    if len(samples) < 3:
        raise TooFewSamples("need at least 3 calibration samples")
    B = [s.bitrate for s in samples]
    S = [s.throughput for s in samples]
    return ThroughputRegressor(pivot=pivot).fit(B, S).to_model(c_thr)


def measure_compression_samples(
    partitions: Sequence[FieldPartition],
    bounds: Sequence[float] = tuple(10.0 ** -k for k in range(1, 9)),
    mode: str = "pointwise-relative",
    repeats: int = 1,
) -> list:
    """Offline sweep: one (bit-rate, MB/s) sample per partition and bound."""
    samples = []
    for p in partitions:
        p = _as_partition(p)
        compress(p, ErrorBoundConfig(mode, bounds[0]))
        for bound in bounds:
            cfg = ErrorBoundConfig(mode, bound)
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                block = compress(p, cfg)
                best = min(best, time.perf_counter() - t0)
            samples.append(CalibrationSample(block.bitrate, p.nbytes / best / MB))
    return samples


# ---------------------------------------------------------------------------
# compression-ratio estimation

SAMPLE_BLOCK = {1: 4096, 2: 64, 3: 16}


@dataclass(frozen=True)
class RatioEstimate:
    predicted_bitrate: float
    sample_fraction: float
    predicted_ratio: float
    n: int = 0
    b_ori: int = 32
    exact: bool = False

    @property
    def predicted_size(self) -> int:
        return math.ceil(self.predicted_bitrate * self.n / 8.0)


def _sample_blocks(shape3: tuple, ndim: int, fraction: float):
    """Evenly strided full-size blocks covering about ``fraction`` of points.

    Returns (block_shape, starts) or None when sampling cannot save work.
    """
    edge = SAMPLE_BLOCK[ndim]
    bshape = tuple(1 if i < 3 - ndim else min(edge, d) for i, d in enumerate(shape3))
    counts = tuple(d // b for d, b in zip(shape3, bshape))
    total = math.prod(counts)
    covered = total * math.prod(bshape)
    k = max(1, round(fraction * covered / math.prod(bshape)))
    if total < 2 or k >= total:
        return None
    picks = ((np.arange(k) + 0.5) * total / k).astype(np.int64)
    starts = np.stack(np.unravel_index(picks, counts), axis=1) * np.asarray(bshape)
    return bshape, starts


def _sample_symbols(v3: np.ndarray, dtype, eb: float, radius: int, bshape, starts):
    """Codes the full compressor would emit inside the sampled blocks."""
    idx = []
    keep = []
    for ax in range(3):
        # One extra cell on the low side carries the causal neighbours.
        i = starts[:, ax : ax + 1] - 1 + np.arange(bshape[ax] + 1)
        keep.append(i >= 0)
        idx.append(np.maximum(i, 0))
    sub = v3[
        idx[0][:, :, None, None], idx[1][:, None, :, None], idx[2][:, None, None, :]
    ].astype(np.float64)
    inside = keep[0][:, :, None, None] & keep[1][:, None, :, None] & keep[2][:, None, None, :]
    sub[~inside] = 0.0
    sym, mask = _quantize(sub, dtype, eb, radius, axes=(1, 2, 3))
    return sym[:, 1:, 1:, 1:].ravel(), int(np.count_nonzero(mask[:, 1:, 1:, 1:]))


def estimate_ratio(p, cfg: ErrorBoundConfig, sample_fraction: float = 0.05) -> RatioEstimate:
    """Predict the compressed bit-rate from a strided sample of blocks.

    Each sampled block is quantized together with a one-cell causal halo, so
    its codes equal the codes the full compressor would emit there.  The
    sampled Huffman + run-length stream is scaled to the full point count;
    fixed header bytes and the code table are added once.  Partitions too
    small to hold more than one sample block are compressed in full.
    """
    if not 0 < sample_fraction <= 1:
        raise InvalidInput("sample_fraction must lie in (0, 1]")
    p = _as_partition(p)
    if p.n == 0:
        raise InvalidInput("empty partition")
    values = p.values
    plan = None
    if sample_fraction < 1:
        plan = _sample_blocks(_shape3(p.dims), len(p.dims), sample_fraction)
    if plan is None:
        block: CompressedBlock = compress(p, cfg)
        return RatioEstimate(block.bitrate, 1.0, block.ratio, p.n, p.b_ori, exact=True)
    eb = cfg.absolute_bound(values)
    v3 = values.reshape(_shape3(p.dims))
    sample, unpred = _sample_symbols(v3, values.dtype, eb, cfg.radius, *plan)
    table, bits = _huffman_bits(sample)
    stream = _kernels.rle_encode(bits)
    scale = p.n / sample.size
    est_bytes = (
        FIXED_OVERHEAD
        + table.nbytes
        + len(stream) * scale
        + unpred * scale * values.dtype.itemsize
    )
    b_hat = 8.0 * est_bytes / p.n
    return RatioEstimate(b_hat, sample.size / p.n, p.b_ori / b_hat, p.n, p.b_ori)


# ---------------------------------------------------------------------------
# write-throughput calibration


class WriteCalibration(NamedTuple):
    c_thr: float
    warning: bool
    throughputs: tuple


def calibrate_write_throughput(
    harness: Callable[[int], float], sizes: Sequence[int], plateau_tol: float = 0.05
) -> WriteCalibration:
    """Plateau write throughput: mean of the two largest sizes' MB/s.

    ``harness(size_bytes)`` returns the measured throughput in MB/s.  The
    warning flag is raised when those two measurements differ by more than
    ``plateau_tol`` relative, i.e. the sweep never reached the plateau.
    """
    sizes = sorted(int(s) for s in sizes)
    if len(sizes) < 3:
        raise TooFewSamples("need at least 3 write sizes")
    thr = tuple(float(harness(s)) for s in sizes)
    if any(not t > 0 for t in thr):
        raise InvalidInput("harness returned a non-positive throughput")
    a, b = thr[-2], thr[-1]
    c_thr = (a + b) / 2.0
    warn = abs(b - a) / c_thr > plateau_tol
    if warn:
        warnings.warn("write throughput did not plateau over the given sizes")
    return WriteCalibration(c_thr, warn, thr)


@dataclass
class FileWriteHarness:
    """Measures positional-write throughput into a scratch file.

    ``bandwidth`` (bytes/s) optionally paces the writes to emulate a slower
    medium; ``chunk`` is the size of each ``pwrite``.
    """

    directory: str | None = None
    bandwidth: float | None = None
    chunk: int = 1 << 20
    sync: bool = False
    repeats: int = 1
    _buf: bytes = field(default=b"", repr=False)

    def __call__(self, size: int) -> float:
        from .container import SharedFile, WriteChannel

        if len(self._buf) < self.chunk:
            self._buf = np.random.default_rng(0).bytes(self.chunk)
        best = math.inf
        for _ in range(self.repeats):
            fd, path = tempfile.mkstemp(dir=self.directory, suffix=".ocpw-cal")
            os.close(fd)
            try:
                with SharedFile(path, create=True) as f:
                    ch = WriteChannel(f, 0, self.bandwidth)
                    t0 = time.perf_counter()
                    off = 0
                    while off < size:
                        n = min(self.chunk, size - off)
                        ch.write(off, self._buf[:n])
                        off += n
                    if self.sync:
                        f.sync()
                    best = min(best, time.perf_counter() - t0)
            finally:
                os.unlink(path)
        return size / best / MB
