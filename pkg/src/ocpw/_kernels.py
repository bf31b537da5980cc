"""Compiled inner loops for the codec.

Every kernel here is sequential by nature (bit streams, causal decoding) and
is compiled with ``nogil`` so rank threads can run them side by side.
"""

import numpy as np
from numba import njit

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)

RLE_MAX_LITERAL = 128
RLE_MIN_RUN = 3
RLE_MAX_RUN = 130


@njit(cache=True, nogil=True)
def fnv1a64(buf):
    h = FNV_OFFSET
    for i in range(buf.shape[0]):
        h ^= np.uint64(buf[i])
        h *= FNV_PRIME
    return h


@njit(cache=True, nogil=True)
def huffman_lengths(freqs):
    """Optimal prefix-code lengths via the two-queue merge on sorted weights."""
    m = freqs.shape[0]
    lengths = np.ones(m, dtype=np.int64)
    if m == 1:
        return lengths
    order = np.argsort(freqs, kind="mergesort")
    weight = np.empty(2 * m - 1, dtype=np.int64)
    parent = np.zeros(2 * m - 1, dtype=np.int64)
    for i in range(m):
        weight[i] = freqs[order[i]]
    leaf = 0
    inner = m
    for k in range(m, 2 * m - 1):
        pair = np.empty(2, dtype=np.int64)
        for t in range(2):
            # Leaves win ties, which keeps the tree shallow.
            if leaf < m and (inner >= k or weight[leaf] <= weight[inner]):
                pair[t] = leaf
                leaf += 1
            else:
                pair[t] = inner
                inner += 1
        weight[k] = weight[pair[0]] + weight[pair[1]]
        parent[pair[0]] = k
        parent[pair[1]] = k
    depth = np.zeros(2 * m - 1, dtype=np.int64)
    for node in range(2 * m - 3, -1, -1):
        depth[node] = depth[parent[node]] + 1
    for i in range(m):
        lengths[order[i]] = depth[i]
    return lengths


@njit(cache=True, nogil=True)
def canonical_codes(order, lengths):
    """Canonical code values for symbols visited in (length, symbol) order."""
    codes = np.zeros(lengths.shape[0], dtype=np.uint64)
    if order.shape[0] == 0:
        return codes
    code = np.uint64(0)
    prev = lengths[order[0]]
    for j in range(order.shape[0]):
        k = order[j]
        ln = lengths[k]
        code = code << np.uint64(ln - prev)
        codes[k] = code
        code += np.uint64(1)
        prev = ln
    return codes


@njit(cache=True, nogil=True)
def huffman_pack(idx, codes, lengths):
    """Concatenate the canonical code of every symbol index, MSB first."""
    total = 0
    for i in range(idx.shape[0]):
        total += lengths[idx[i]]
    out = np.zeros((total + 7) // 8, dtype=np.uint8)
    pos = 0
    acc = np.uint64(0)
    nacc = 0
    for i in range(idx.shape[0]):
        s = idx[i]
        ln = lengths[s]
        acc = (acc << np.uint64(ln)) | codes[s]
        nacc += ln
        while nacc >= 8:
            nacc -= 8
            out[pos] = np.uint8((acc >> np.uint64(nacc)) & np.uint64(0xFF))
            pos += 1
        acc &= (np.uint64(1) << np.uint64(nacc)) - np.uint64(1)
    if nacc > 0:
        out[pos] = np.uint8((acc << np.uint64(8 - nacc)) & np.uint64(0xFF))
    return out, total


@njit(cache=True, nogil=True)
def huffman_unpack(buf, n, first_code, count, offset, sorted_idx, max_len):
    """Decode ``n`` symbol indices; returns (indices, ok)."""
    out = np.empty(n, dtype=np.int64)
    nbits = buf.shape[0] * 8
    bit = 0
    for i in range(n):
        code = 0
        found = False
        for ln in range(1, max_len + 1):
            if bit >= nbits:
                return out, False
            b = (buf[bit >> 3] >> (7 - (bit & 7))) & 1
            bit += 1
            code = (code << 1) | b
            k = code - first_code[ln]
            if count[ln] > 0 and k >= 0 and k < count[ln]:
                out[i] = sorted_idx[offset[ln] + k]
                found = True
                break
        if not found:
            return out, False
    return out, True


@njit(cache=True, nogil=True)
def rle_encode(buf):
    n = buf.shape[0]
    out = np.empty(n + n // RLE_MAX_LITERAL + 2, dtype=np.uint8)
    o = 0
    i = 0
    while i < n:
        r = 1
        while i + r < n and r < RLE_MAX_RUN and buf[i + r] == buf[i]:
            r += 1
        if r >= RLE_MIN_RUN:
            out[o] = np.uint8(128 + r - RLE_MIN_RUN)
            out[o + 1] = buf[i]
            o += 2
            i += r
            continue
        start = i
        lit = 0
        while i < n and lit < RLE_MAX_LITERAL:
            if (
                i + 2 < n
                and buf[i] == buf[i + 1]
                and buf[i] == buf[i + 2]
            ):
                break
            i += 1
            lit += 1
        out[o] = np.uint8(lit - 1)
        o += 1
        for j in range(lit):
            out[o + j] = buf[start + j]
        o += lit
    return out[:o].copy()


@njit(cache=True, nogil=True)
def _rle_decoded_length(buf):
    n = buf.shape[0]
    i = 0
    total = 0
    while i < n:
        c = buf[i]
        if c < 128:
            lit = c + 1
            if i + 1 + lit > n:
                return -1
            total += lit
            i += 1 + lit
        else:
            if i + 1 >= n:
                return -1
            total += c - 128 + RLE_MIN_RUN
            i += 2
    return total


@njit(cache=True, nogil=True)
def rle_decode(buf):
    """Inverse of :func:`rle_encode`; returns (bytes, ok)."""
    total = _rle_decoded_length(buf)
    if total < 0:
        return np.empty(0, dtype=np.uint8), False
    out = np.empty(total, dtype=np.uint8)
    i = 0
    o = 0
    n = buf.shape[0]
    while i < n:
        c = buf[i]
        if c < 128:
            lit = c + 1
            for j in range(lit):
                out[o + j] = buf[i + 1 + j]
            o += lit
            i += 1 + lit
        else:
            r = c - 128 + RLE_MIN_RUN
            v = buf[i + 1]
            for j in range(r):
                out[o + j] = v
            o += r
            i += 2
    return out, True


@njit(cache=True, nogil=True)
def lorenzo_decode(symbols, shape, radius, step, verbatim, qmax):
    """Causal reconstruction over a 3-D grid (size-1 axes for lower ranks).

    ``symbols`` is in raster order; 0 marks a verbatim point whose raw value
    is taken from ``verbatim`` in order. Returns (values, consumed, ok).
    """
    nz, ny, nx = shape[0], shape[1], shape[2]
    q = np.zeros((nz, ny, nx), dtype=np.int64)
    out = np.empty((nz, ny, nx), dtype=np.float64)
    u = 0
    p = 0
    nv = verbatim.shape[0]
    for i in range(nz):
        for j in range(ny):
            for k in range(nx):
                s = symbols[p]
                p += 1
                if s == 0:
                    if u >= nv:
                        return out, u, False
                    v = verbatim[u]
                    u += 1
                    t = np.rint(v / step)
                    if t > qmax:
                        t = qmax
                    elif t < -qmax:
                        t = -qmax
                    q[i, j, k] = np.int64(t)
                    out[i, j, k] = v
                    continue
                pred = np.int64(0)
                if i > 0:
                    pred += q[i - 1, j, k]
                if j > 0:
                    pred += q[i, j - 1, k]
                if k > 0:
                    pred += q[i, j, k - 1]
                if i > 0 and j > 0:
                    pred -= q[i - 1, j - 1, k]
                if i > 0 and k > 0:
                    pred -= q[i - 1, j, k - 1]
                if j > 0 and k > 0:
                    pred -= q[i, j - 1, k - 1]
                if i > 0 and j > 0 and k > 0:
                    pred += q[i - 1, j - 1, k - 1]
                qv = pred + (s - radius)
                q[i, j, k] = qv
                out[i, j, k] = qv * step
    return out, u, True
