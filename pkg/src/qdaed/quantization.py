"""Min-max n-bit fake quantization, the straight-through estimator, and
bit-packed storage of quantized tensors.

A tensor ``V`` with range ``(alpha, beta) = (max - min, min)`` is mapped to

    alpha * round(clamp((V - beta) / alpha) * (2**n - 1)) / (2**n - 1) + beta

i.e. onto the ``2**n``-point lattice ``beta + k * alpha / (2**n - 1)``.
"""

import enum
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ArgumentError, FormatError, TruncationError

ROUNDING = "half-away-from-zero"
CELL_STATE_BITS = 16


class RangePolicy(enum.Enum):
    DYNAMIC = "dynamic-per-tensor"
    STATIC = "static-stored"
    FIXED = "fixed-known-bounds"


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    policy: RangePolicy = RangePolicy.DYNAMIC
    rounding: str = ROUNDING

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 1 <= self.bits <= 16:
            raise ArgumentError(f"bit-width must be an integer in [1, 16], got {self.bits!r}")
        if self.rounding != ROUNDING:
            raise ArgumentError(f"only {ROUNDING} rounding is supported")

    @property
    def levels(self):
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class QuantRange:
    alpha: float
    beta: float

    def __post_init__(self):
        # stored as float32, like every tensor value
        object.__setattr__(self, "alpha", float(np.float32(self.alpha)))
        object.__setattr__(self, "beta", float(np.float32(self.beta)))

    @property
    def low(self):
        return self.beta

    @property
    def high(self):
        return float(np.float32(self.alpha) + np.float32(self.beta))


UNIT_RANGE = QuantRange(alpha=1.0, beta=0.0)  # sigmoid outputs
SYMMETRIC_RANGE = QuantRange(alpha=2.0, beta=-1.0)  # tanh outputs


def compute_range(v):
    v = np.asarray(v, dtype=np.float32)
    if v.size == 0:
        raise ArgumentError("cannot compute the range of an empty tensor")
    if not np.all(np.isfinite(v)):
        raise ArgumentError("range of a non-finite tensor is undefined")
    lo = v.min()
    hi = v.max()
    return QuantRange(alpha=hi - lo, beta=lo)


def _levels(spec):
    if isinstance(spec, QuantSpec):
        return spec.levels
    return QuantSpec(int(spec)).levels


def fake_quantize(v, spec, qrange=None):
    """Quantize-dequantize ``v``; ``spec`` is a :class:`QuantSpec` or a bit count.

    Without ``qrange`` the range is computed from ``v`` itself. Values outside
    the range are clamped. A zero-width range returns ``v`` unchanged.
    """
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float32)
    if qrange is None:
        qrange = compute_range(v)
    if not (np.isfinite(qrange.alpha) and np.isfinite(qrange.beta)) or qrange.alpha < 0:
        raise ArgumentError(f"invalid quantization range {qrange}")
    return kernels.fq_range(v, qrange.beta, qrange.alpha, _levels(spec))


def quantize_codes(v, spec, qrange):
    """Integer codes in ``[0, 2**n - 1]`` for ``v`` under ``qrange``."""
    return kernels.codes_range(np.asarray(v), qrange.beta, qrange.alpha, _levels(spec))


def dequantize_codes(codes, spec, qrange, dtype=np.float32):
    levels = _levels(spec)
    k = np.asarray(codes, dtype=np.float64)
    return (qrange.beta + qrange.alpha * (k / levels)).astype(dtype)


def ste_backward(upstream_grad):
    """Straight-through estimator: the rounding node passes gradients unchanged."""
    return upstream_grad


# --------------------------------------------------------------------------
# quantizers used inside the LSTM forward pass


class Quantizer:
    """Applies the per-operator rules during a quantized forward pass.

    ``bits`` covers weights, matmul inputs and activation outputs; the cell
    state always uses ``cell_bits`` (16 unless overridden for experiments).
    """

    enabled = True

    def __init__(self, bits, cell_bits=CELL_STATE_BITS):
        self.spec = QuantSpec(bits)
        self.cell_spec = QuantSpec(cell_bits)
        self.levels = self.spec.levels
        self.cell_levels = self.cell_spec.levels

    def weight(self, w, static_range=None):
        qrange = static_range if static_range is not None else compute_range(w)
        return kernels.fq_range(w, qrange.beta, qrange.alpha, self.levels)

    def rows(self, x2d):
        """Dynamic per-row range: one range per example vector."""
        return kernels.fq_rows(x2d, self.levels)

    def cell(self, c2d):
        return kernels.fq_rows(c2d, self.cell_levels)

    def sigmoid_out(self, s):
        return kernels.fq_range(s, 0.0, 1.0, self.levels)

    def tanh_out(self, t):
        return kernels.fq_range(t, -1.0, 2.0, self.levels)

    def __repr__(self):
        return f"Quantizer(bits={self.spec.bits}, cell_bits={self.cell_spec.bits})"


class PassthroughQuantizer:
    """Same wiring as :class:`Quantizer` with every quantization node the identity."""

    enabled = False

    def weight(self, w, static_range=None):
        return w

    def rows(self, x2d):
        return x2d

    cell = rows
    sigmoid_out = rows
    tanh_out = rows


# --------------------------------------------------------------------------
# packed storage


@dataclass(frozen=True)
class PackedIntTensor:
    dims: tuple
    bits: int
    qrange: QuantRange
    payload: bytes

    @property
    def count(self):
        return int(np.prod(self.dims, dtype=np.int64)) if self.dims else 1

    def codes(self):
        return unpack_codes(self)

    def to_bytes(self):
        head = struct.pack("<BB", self.bits, len(self.dims))
        head += b"".join(struct.pack("<Q", d) for d in self.dims)
        head += struct.pack("<ff", self.qrange.alpha, self.qrange.beta)
        return head + self.payload

    @classmethod
    def from_bytes(cls, buf, offset=0):
        """Decode one packed tensor; returns ``(tensor, next_offset)``."""
        view = memoryview(buf)
        need = offset + 2
        if len(view) < need:
            raise TruncationError("packed tensor header truncated")
        bits, rank = struct.unpack_from("<BB", view, offset)
        if not 1 <= bits <= 16:
            raise FormatError(f"invalid bit-width {bits} in packed tensor")
        need += 8 * rank + 8
        if len(view) < need:
            raise TruncationError("packed tensor header truncated")
        dims = struct.unpack_from(f"<{rank}Q", view, offset + 2)
        alpha, beta = struct.unpack_from("<ff", view, offset + 2 + 8 * rank)
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = (count * bits + 7) // 8
        if len(view) < need + nbytes:
            raise TruncationError("packed tensor payload truncated")
        payload = bytes(view[need : need + nbytes])
        return cls(tuple(dims), bits, QuantRange(alpha, beta), payload), need + nbytes


def pack(codes, bits, dims, qrange):
    codes = np.asarray(codes)
    dims = tuple(int(d) for d in dims)
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    if codes.size != count:
        raise ArgumentError(f"{codes.size} codes do not fill dims {dims}")
    bits = int(bits)
    QuantSpec(bits)
    flat = codes.ravel()
    if flat.size and (flat.min() < 0 or flat.max() > (1 << bits) - 1):
        raise ArgumentError(f"codes out of range for {bits}-bit storage")
    payload = kernels.pack(flat.astype(np.uint32), bits)
    return PackedIntTensor(dims, bits, qrange, payload.tobytes())


def unpack_codes(packed):
    raw = np.frombuffer(packed.payload, dtype=np.uint8)
    return kernels.unpack(raw, packed.bits, packed.count).reshape(packed.dims)


def unpack(packed, dtype=np.float32):
    """Dequantized tensor; equals ``fake_quantize`` under the same bits and range."""
    return dequantize_codes(unpack_codes(packed), packed.bits, packed.qrange, dtype)


def pack_tensor(v, bits, qrange=None):
    """Quantize ``v`` with a static range (its own min/max by default) and pack it."""
    v = np.asarray(v, dtype=np.float32)
    if qrange is None:
        qrange = compute_range(v)
    codes = quantize_codes(v, bits, qrange)
    return pack(codes, bits, v.shape, qrange)
