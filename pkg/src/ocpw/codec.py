"""Prediction-based error-bounded lossy codec.

The pipeline has three stages:

* a first-order Lorenzo predictor over already-decoded neighbours,
* linear quantization of the prediction residual into ``2 * bound`` wide
  bins (residuals that do not fit the capped alphabet are stored verbatim),
* canonical Huffman coding of the bin indices followed by a byte-level
  run-length pass.

Quantization is done on the reconstruction grid: every point is snapped to
``q = rint(v / (2 * bound))`` and the Lorenzo stencil is applied to the
integer grid.  Because predictions are built from reconstructed values, the
code of a point is exactly ``q - lorenzo(q)``, which lets the encoder run
fully vectorised while the decoder stays causal.

Payload layout (little-endian)::

    "OCB1" | n u64 | B_ori u8 | mode u8 | bound f64
    | table_count u32 | table_count * (symbol u32, length u8)
    | stream_len u64 | stream
    | unpredictable_count u64 | raw values
    | checksum u64 (FNV-1a over everything before it)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import DecodeError, InvalidInput, UnsupportedValue

MAGIC = b"OCB1"
HEADER = struct.Struct("<4sQBBd")
U32 = struct.Struct("<I")
U64 = struct.Struct("<Q")
TABLE_DTYPE = np.dtype([("symbol", "<u4"), ("length", "u1")])

MAX_CODE_LENGTH = 32
# Grid indices are clipped here so Lorenzo sums stay inside int64.
QMAX = float(2**53)

MODES = {"absolute": 0, "pointwise-relative": 1}
_MODE_ALIASES = {
    "abs": "absolute",
    "absolute": "absolute",
    "rel": "pointwise-relative",
    "relative": "pointwise-relative",
    "pointwise-relative": "pointwise-relative",
}

# Bytes of payload that do not depend on the data.
FIXED_OVERHEAD = HEADER.size + U32.size + U64.size + U64.size + U64.size


@dataclass(frozen=True)
class ErrorBoundConfig:
    """User error bound plus the cap on the quantization alphabet.

    ``mode`` is ``"absolute"`` or ``"pointwise-relative"``; a relative bound
    is turned into an absolute one per partition by scaling with the value
    range.
    """

    mode: str = "absolute"
    bound: float = 1e-3
    max_quant_codes: int = 65536

    def __post_init__(self):
        mode = _MODE_ALIASES.get(str(self.mode).lower())
        if mode is None:
            raise InvalidInput(f"unknown error-bound mode {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if not (self.bound > 0 and math.isfinite(self.bound)):
            raise InvalidInput("bound must be a positive finite number")
        if self.max_quant_codes < 2 or self.max_quant_codes % 2:
            raise InvalidInput("max_quant_codes must be an even integer >= 2")

    @property
    def radius(self) -> int:
        return self.max_quant_codes // 2

    def absolute_bound(self, values: np.ndarray) -> float:
        if self.mode == "absolute":
            return float(self.bound)
        lo = float(np.min(values))
        hi = float(np.max(values))
        span = hi - lo
        # Constant partitions have no range; the bound is then taken as-is.
        return float(self.bound) * span if span > 0 else float(self.bound)


@dataclass
class FieldPartition:
    """One rank's block of one named field."""

    field_name: str
    rank: int
    dims: tuple
    values: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if not 1 <= len(self.dims) <= 3 or any(d <= 0 for d in self.dims):
            raise InvalidInput(f"dims must be 1 to 3 positive integers, got {self.dims}")
        values = np.asarray(self.values)
        if values.dtype not in (np.float32, np.float64):
            raise InvalidInput(f"values must be float32 or float64, not {values.dtype}")
        if values.size != math.prod(self.dims):
            raise InvalidInput(
                f"product of dims {self.dims} does not match {values.size} values"
            )
        if self.rank < 0:
            raise InvalidInput("rank must be >= 0")
        self.values = values.reshape(self.dims)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def b_ori(self) -> int:
        return self.values.dtype.itemsize * 8

    @property
    def nbytes(self) -> int:
        return self.values.nbytes


@dataclass(frozen=True)
class CompressedBlock:
    payload: bytes
    n: int
    bitrate: float
    unpredictable_count: int
    checksum: int
    b_ori: int = 32
    bound: float = 0.0
    mode: str = "absolute"
    sections: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def ratio(self) -> float:
        return self.b_ori / self.bitrate

    @classmethod
    def from_payload(cls, payload: bytes) -> "CompressedBlock":
        """Parse and checksum-verify a payload."""
        parts = _parse_payload(bytes(payload))
        return cls(
            payload=bytes(payload),
            n=parts["n"],
            bitrate=8.0 * len(payload) / parts["n"],
            unpredictable_count=parts["unpredictable_count"],
            checksum=parts["checksum"],
            b_ori=parts["b_ori"],
            bound=parts["bound"],
            mode=parts["mode"],
            sections=parts,
        )


def _as_partition(p) -> FieldPartition:
    if isinstance(p, FieldPartition):
        return p
    arr = np.asarray(p)
    return FieldPartition("", 0, arr.shape, arr)


def _shape3(dims: Sequence[int]) -> tuple:
    dims = tuple(int(d) for d in dims)
    return (1,) * (3 - len(dims)) + dims


# ---------------------------------------------------------------------------
# prediction and quantization


def lorenzo_predict(values, dims, index) -> float:
    """First-order Lorenzo prediction of ``values[index]``.

    Only neighbours with smaller indices along every axis are used; those
    outside the grid count as zero.
    """
    arr = np.asarray(values, dtype=np.float64).reshape(tuple(dims))
    index = tuple(int(i) for i in np.atleast_1d(index))
    if len(index) != arr.ndim or any(not 0 <= i < d for i, d in zip(index, arr.shape)):
        raise InvalidInput(f"index {index} outside dims {arr.shape}")
    pred = 0.0
    ndim = arr.ndim
    # Inclusion-exclusion over the non-empty subsets of axes stepped back by one.
    for mask in range(1, 1 << ndim):
        pos = list(index)
        bits = 0
        for ax in range(ndim):
            if mask >> ax & 1:
                pos[ax] -= 1
                bits += 1
        if min(pos) < 0:
            continue
        pred += arr[tuple(pos)] if bits % 2 else -arr[tuple(pos)]
    return float(pred)


def quantize_linear(residual: float, bound: float, max_codes: int) -> Optional[int]:
    """Signed bin offset for ``residual``, or None when it is unpredictable.

    The reconstruction ``predicted + 2 * bound * code`` is within ``bound`` of
    the true value whenever a code is returned.
    """
    if not bound > 0:
        raise InvalidInput("bound must be positive")
    code = round(residual / (2.0 * bound))
    if abs(code) >= max_codes // 2:
        return None
    return int(code)


def _lorenzo_residual(q: np.ndarray, axes=None) -> np.ndarray:
    r = q
    for axis in range(q.ndim) if axes is None else axes:
        r = np.diff(r, axis=axis, prepend=0)
    return r


def _quantize(v3: np.ndarray, dtype, eb: float, radius: int, axes=None):
    """Symbols and the verbatim mask for a float64 block.

    ``v3`` may carry a one-cell causal halo on the low side of each axis in
    ``axes``; callers slice the halo away afterwards.
    """
    step = 2.0 * eb
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        t = np.rint(v3 / step)
    np.clip(t, -QMAX, QMAX, out=t)
    q = t.astype(np.int64)
    recon = (q * step).astype(dtype).astype(np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        off_grid = ~(np.abs(v3 - recon) <= eb)
    r = _lorenzo_residual(q, axes)
    unpred = off_grid | (np.abs(r) >= radius)
    symbols = np.where(unpred, 0, r + radius)
    return symbols, unpred


# ---------------------------------------------------------------------------
# entropy coding


def _code_lengths(freqs: np.ndarray) -> np.ndarray:
    """Huffman code lengths for positive frequencies, capped at 32 bits."""
    freqs = np.ascontiguousarray(freqs, dtype=np.int64)
    while True:
        lengths = _kernels.huffman_lengths(freqs)
        if lengths.max() <= MAX_CODE_LENGTH:
            return lengths
        # Flatten the distribution until the deepest code fits.
        freqs = (freqs + 1) // 2


def _canonical_codes(symbols: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    order = np.lexsort((symbols, lengths)).astype(np.int64)
    return _kernels.canonical_codes(order, np.asarray(lengths, dtype=np.int64))


def _huffman_bits(sym: np.ndarray):
    """Table entries and the packed (pre run-length) Huffman bit stream."""
    sym = np.ascontiguousarray(sym, dtype=np.int64).ravel()
    if sym.size == 0:
        return np.zeros(0, dtype=TABLE_DTYPE), np.zeros(0, dtype=np.uint8)
    if sym.min() < 0 or sym.max() >= 2**32:
        raise InvalidInput("entropy coder symbols must lie in [0, 2**32)")
    top = int(sym.max())
    if top < 1 << 24:
        freqs = np.bincount(sym, minlength=top + 1)
        used = np.flatnonzero(freqs)
        lengths = _code_lengths(freqs[used])
        codes = _canonical_codes(used, lengths)
        full_len = np.zeros(top + 1, dtype=np.int64)
        full_code = np.zeros(top + 1, dtype=np.uint64)
        full_len[used] = lengths
        full_code[used] = codes
        bits, _ = _kernels.huffman_pack(sym, full_code, full_len)
    else:
        used, inverse, freqs = np.unique(sym, return_inverse=True, return_counts=True)
        lengths = _code_lengths(freqs)
        codes = _canonical_codes(used, lengths)
        bits, _ = _kernels.huffman_pack(inverse.astype(np.int64), codes, lengths)
    table = np.empty(len(used), dtype=TABLE_DTYPE)
    table["symbol"] = used
    table["length"] = lengths
    return table, bits


def entropy_encode(codes) -> bytes:
    """Huffman + run-length encode non-negative integer symbols.

    The output is self-describing apart from the symbol count, which the
    caller passes back to :func:`entropy_decode`.
    """
    table, bits = _huffman_bits(np.asarray(codes))
    stream = _kernels.rle_encode(bits)
    return b"".join(
        (U32.pack(len(table)), table.tobytes(), U64.pack(len(stream)), stream.tobytes())
    )


def _read_entropy(buf: bytes, pos: int, n: int):
    """Decode an entropy section starting at ``pos``; returns (symbols, end)."""
    if pos + U32.size > len(buf):
        raise DecodeError("truncated entropy table header")
    (count,) = U32.unpack_from(buf, pos)
    pos += U32.size
    tbytes = count * TABLE_DTYPE.itemsize
    if pos + tbytes + U64.size > len(buf):
        raise DecodeError("truncated entropy table")
    table = np.frombuffer(buf, dtype=TABLE_DTYPE, count=count, offset=pos)
    pos += tbytes
    (slen,) = U64.unpack_from(buf, pos)
    pos += U64.size
    if pos + slen > len(buf):
        raise DecodeError("truncated code stream")
    stream = np.frombuffer(buf, dtype=np.uint8, count=slen, offset=pos)
    pos += slen
    if n == 0:
        if count or slen:
            raise DecodeError("non-empty entropy section for zero symbols")
        return np.zeros(0, dtype=np.int64), pos
    if count == 0:
        raise DecodeError("empty Huffman table")
    symbols = table["symbol"].astype(np.int64)
    lengths = table["length"].astype(np.int64)
    if lengths.min() < 1 or lengths.max() > MAX_CODE_LENGTH:
        raise DecodeError("invalid Huffman code length")
    if np.any(np.diff(symbols) <= 0):
        raise DecodeError("Huffman table symbols not strictly increasing")
    if count > 1 and np.sum(np.ldexp(1.0, -lengths)) > 1.0 + 1e-12:
        raise DecodeError("Huffman table violates the Kraft inequality")
    bits, ok = _kernels.rle_decode(stream.copy())
    if not ok:
        raise DecodeError("corrupt run-length stream")
    max_len = int(lengths.max())
    count_by_len = np.bincount(lengths, minlength=max_len + 1).astype(np.int64)
    first = np.zeros(max_len + 1, dtype=np.int64)
    offset = np.zeros(max_len + 1, dtype=np.int64)
    code = 0
    for ln in range(1, max_len + 1):
        code = (code + count_by_len[ln - 1]) << 1 if ln > 1 else 0
        first[ln] = code
        offset[ln] = offset[ln - 1] + count_by_len[ln - 1]
    sorted_sym = symbols[np.lexsort((symbols, lengths))]
    out, ok = _kernels.huffman_unpack(bits, n, first, count_by_len, offset, sorted_sym, max_len)
    if not ok:
        raise DecodeError("code stream ended before all symbols were decoded")
    return out, pos


def entropy_decode(data: bytes, n: int) -> np.ndarray:
    data = bytes(data)
    out, end = _read_entropy(data, 0, n)
    if end != len(data):
        raise DecodeError("trailing bytes after entropy section")
    return out


# ---------------------------------------------------------------------------
# compress / decompress


def _check_finite(values: np.ndarray):
    if not np.all(np.isfinite(values)):
        raise UnsupportedValue("NaN and Inf values are not supported")


def compress(p, cfg: ErrorBoundConfig) -> CompressedBlock:
    """Compress one partition under ``cfg``; deterministic byte output."""
    p = _as_partition(p)
    if p.n == 0:
        raise InvalidInput("empty partition")
    values = p.values
    _check_finite(values)
    dtype = values.dtype
    eb = cfg.absolute_bound(values)
    v3 = values.astype(np.float64).reshape(_shape3(p.dims))
    symbols, unpred = _quantize(v3, dtype, eb, cfg.radius)
    verbatim = values.reshape(-1)[unpred.reshape(-1)].astype(dtype.newbyteorder("<"))
    table, bits = _huffman_bits(symbols.reshape(-1))
    stream = _kernels.rle_encode(bits)
    body = b"".join(
        (
            HEADER.pack(MAGIC, p.n, p.b_ori, MODES[cfg.mode], eb),
            U32.pack(len(table)),
            table.tobytes(),
            U64.pack(len(stream)),
            stream.tobytes(),
            U64.pack(len(verbatim)),
            verbatim.tobytes(),
        )
    )
    checksum = int(_kernels.fnv1a64(np.frombuffer(body, dtype=np.uint8)))
    payload = body + U64.pack(checksum)
    return CompressedBlock(
        payload=payload,
        n=p.n,
        bitrate=8.0 * len(payload) / p.n,
        unpredictable_count=int(len(verbatim)),
        checksum=checksum,
        b_ori=p.b_ori,
        bound=eb,
        mode=cfg.mode,
    )


def _parse_payload(buf: bytes) -> dict:
    if len(buf) < HEADER.size + U64.size:
        raise DecodeError("payload shorter than its fixed header")
    body = np.frombuffer(buf, dtype=np.uint8, count=len(buf) - U64.size)
    (stored,) = U64.unpack_from(buf, len(buf) - U64.size)
    if int(_kernels.fnv1a64(body)) != stored:
        raise DecodeError("checksum mismatch")
    magic, n, b_ori, mode, bound = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DecodeError("bad payload magic")
    if b_ori not in (32, 64) or mode not in (0, 1) or n == 0 or not bound > 0:
        raise DecodeError("invalid payload header")
    return {
        "n": n,
        "b_ori": b_ori,
        "mode": "absolute" if mode == 0 else "pointwise-relative",
        "bound": bound,
        "checksum": stored,
        "unpredictable_count": _verbatim_count(buf, n),
    }


def _verbatim_count(buf: bytes, n: int) -> int:
    pos = HEADER.size
    if pos + U32.size > len(buf):
        raise DecodeError("truncated payload")
    (count,) = U32.unpack_from(buf, pos)
    pos += U32.size + count * TABLE_DTYPE.itemsize
    if pos + U64.size > len(buf):
        raise DecodeError("truncated payload")
    (slen,) = U64.unpack_from(buf, pos)
    pos += U64.size + slen
    if pos + U64.size > len(buf):
        raise DecodeError("truncated payload")
    (u,) = U64.unpack_from(buf, pos)
    if u > n:
        raise DecodeError("unpredictable count exceeds point count")
    return u


def decompress(b, cfg: ErrorBoundConfig, dims, field_name: str = "", rank: int = 0) -> FieldPartition:
    """Invert :func:`compress`; raises DecodeError on any corruption."""
    if not isinstance(b, CompressedBlock):
        b = CompressedBlock.from_payload(b)
    buf = b.payload
    info = _parse_payload(buf)
    n = info["n"]
    if math.prod(dims) != n:
        raise DecodeError(f"dims {tuple(dims)} do not match {n} encoded points")
    if info["mode"] != cfg.mode:
        raise DecodeError(f"payload mode {info['mode']} differs from config {cfg.mode}")
    symbols, pos = _read_entropy(buf, HEADER.size, n)
    radius = cfg.radius
    if symbols.max() > 2 * radius - 1:
        raise DecodeError("symbol outside the quantization alphabet")
    (u,) = U64.unpack_from(buf, pos)
    pos += U64.size
    dtype = np.dtype("<f4") if info["b_ori"] == 32 else np.dtype("<f8")
    end = pos + u * dtype.itemsize
    if end + U64.size != len(buf):
        raise DecodeError("payload length inconsistent with its sections")
    verbatim = np.frombuffer(buf, dtype=dtype, count=u, offset=pos).astype(np.float64)
    step = 2.0 * info["bound"]
    out, used, ok = _kernels.lorenzo_decode(
        symbols, np.asarray(_shape3(dims), dtype=np.int64), radius, step, verbatim, QMAX
    )
    if not ok or used != u:
        raise DecodeError("verbatim value count does not match the code stream")
    values = out.astype(dtype.newbyteorder("=")).reshape(tuple(dims))
    return FieldPartition(field_name, rank, tuple(dims), values)
