"""Fused fake-quantization and bit-packing kernels.

Each kernel exists twice: a vectorised numpy version and a numba ``@njit``
loop version. Both evaluate the same float64 expression sequence, so their
outputs are bit-identical; the active pair is chosen in :mod:`qdaed._accel`.

Codes are rounded half away from zero. Scaled values are non-negative, so
this is ``floor(x)`` plus one when the fractional part is at least one half
(computed exactly, unlike ``floor(x + 0.5)``).
"""

from types import SimpleNamespace

import numpy as np

from ._accel import USE_NUMBA, njit


# --------------------------------------------------------------------------
# numpy reference path


def _np_fq_range(v, beta, alpha, levels):
    if alpha == 0.0:
        return v.copy()
    s = (v.astype(np.float64) - beta) / alpha
    np.clip(s, 0.0, 1.0, out=s)
    x = s * levels
    k = np.floor(x)
    k += (x - k) >= 0.5
    return (beta + alpha * (k / levels)).astype(v.dtype)


def _np_codes_range(v, beta, alpha, levels):
    if alpha == 0.0:
        return np.zeros(v.shape, dtype=np.uint32)
    s = (v.astype(np.float64) - beta) / alpha
    np.clip(s, 0.0, 1.0, out=s)
    x = s * levels
    k = np.floor(x)
    k += (x - k) >= 0.5
    return k.astype(np.uint32)


def _np_fq_rows(x2d, levels):
    lo = x2d.min(axis=1)
    hi = x2d.max(axis=1)
    alpha = hi - lo
    flat = alpha == 0
    beta64 = lo.astype(np.float64)[:, None]
    alpha64 = np.where(flat, 1.0, alpha.astype(np.float64))[:, None]
    s = (x2d.astype(np.float64) - beta64) / alpha64
    np.clip(s, 0.0, 1.0, out=s)
    xs = s * levels
    k = np.floor(xs)
    k += (xs - k) >= 0.5
    out = (beta64 + alpha64 * (k / levels)).astype(x2d.dtype)
    if flat.any():
        out[flat] = x2d[flat]
    return out


def _np_pack(codes, bits):
    shifts = np.arange(bits, dtype=np.uint32)
    bitmat = ((codes.astype(np.uint32)[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitmat.ravel(), bitorder="little")


def _np_unpack(payload, bits, count):
    raw = np.unpackbits(payload, count=count * bits, bitorder="little")
    shifts = np.arange(bits, dtype=np.uint32)
    return (raw.reshape(count, bits).astype(np.uint32) << shifts).sum(axis=1, dtype=np.uint32)


# --------------------------------------------------------------------------
# numba path


@njit
def _nb_fq_flat(v, beta, alpha, levels, out):
    for i in range(v.size):
        s = (np.float64(v[i]) - beta) / alpha
        if s < 0.0:
            s = 0.0
        elif s > 1.0:
            s = 1.0
        x = s * levels
        k = np.floor(x)
        if x - k >= 0.5:
            k += 1.0
        out[i] = beta + alpha * (k / levels)


@njit
def _nb_codes_flat(v, beta, alpha, levels, out):
    for i in range(v.size):
        s = (np.float64(v[i]) - beta) / alpha
        if s < 0.0:
            s = 0.0
        elif s > 1.0:
            s = 1.0
        x = s * levels
        k = np.floor(x)
        if x - k >= 0.5:
            k += 1.0
        out[i] = np.uint32(k)


@njit
def _nb_fq_rows(x2d, levels, out):
    rows, cols = x2d.shape
    for r in range(rows):
        lo = x2d[r, 0]
        hi = x2d[r, 0]
        for c in range(1, cols):
            val = x2d[r, c]
            if val < lo:
                lo = val
            if val > hi:
                hi = val
        alpha = hi - lo
        if alpha == 0:
            for c in range(cols):
                out[r, c] = x2d[r, c]
            continue
        beta64 = np.float64(lo)
        alpha64 = np.float64(alpha)
        for c in range(cols):
            s = (np.float64(x2d[r, c]) - beta64) / alpha64
            if s < 0.0:
                s = 0.0
            elif s > 1.0:
                s = 1.0
            x = s * levels
            k = np.floor(x)
            if x - k >= 0.5:
                k += 1.0
            out[r, c] = beta64 + alpha64 * (k / levels)


@njit
def _nb_pack_into(codes, bits, out):
    pos = 0
    for i in range(codes.size):
        c = codes[i]
        for b in range(bits):
            if (c >> b) & 1:
                out[pos >> 3] |= np.uint8(1 << (pos & 7))
            pos += 1


@njit
def _nb_unpack_into(payload, bits, out):
    pos = 0
    for i in range(out.size):
        c = np.uint32(0)
        for b in range(bits):
            if (payload[pos >> 3] >> (pos & 7)) & 1:
                c |= np.uint32(1) << np.uint32(b)
            pos += 1
        out[i] = c


def _nb_fq_range(v, beta, alpha, levels):
    if alpha == 0.0:
        return v.copy()
    src = np.ascontiguousarray(v)
    out = np.empty_like(src)
    _nb_fq_flat(src.ravel(), float(beta), float(alpha), float(levels), out.ravel())
    return out


def _nb_codes_range(v, beta, alpha, levels):
    if alpha == 0.0:
        return np.zeros(v.shape, dtype=np.uint32)
    src = np.ascontiguousarray(v)
    out = np.empty(src.shape, dtype=np.uint32)
    _nb_codes_flat(src.ravel(), float(beta), float(alpha), float(levels), out.ravel())
    return out


def _nb_fq_rows_wrap(x2d, levels):
    src = np.ascontiguousarray(x2d)
    out = np.empty_like(src)
    _nb_fq_rows(src, float(levels), out)
    return out


def _nb_pack(codes, bits):
    codes = np.ascontiguousarray(codes, dtype=np.uint32).ravel()
    out = np.zeros((codes.size * bits + 7) // 8, dtype=np.uint8)
    _nb_pack_into(codes, np.uint32(bits), out)
    return out


def _nb_unpack(payload, bits, count):
    out = np.empty(count, dtype=np.uint32)
    _nb_unpack_into(np.ascontiguousarray(payload, dtype=np.uint8), np.uint32(bits), out)
    return out


numpy_impl = SimpleNamespace(
    fq_range=_np_fq_range,
    codes_range=_np_codes_range,
    fq_rows=_np_fq_rows,
    pack=_np_pack,
    unpack=_np_unpack,
)

numba_impl = SimpleNamespace(
    fq_range=_nb_fq_range,
    codes_range=_nb_codes_range,
    fq_rows=_nb_fq_rows_wrap,
    pack=_nb_pack,
    unpack=_nb_unpack,
)

_active = numba_impl if USE_NUMBA else numpy_impl

fq_range = _active.fq_range
codes_range = _active.codes_range
fq_rows = _active.fq_rows
pack = _active.pack
unpack = _active.unpack
