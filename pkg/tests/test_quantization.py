from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdaed import kernels
from qdaed.errors import ArgumentError, FormatError, TruncationError
from qdaed.quantization import (
    SYMMETRIC_RANGE,
    UNIT_RANGE,
    PackedIntTensor,
    PassthroughQuantizer,
    QuantRange,
    QuantSpec,
    Quantizer,
    compute_range,
    dequantize_codes,
    fake_quantize,
    pack,
    pack_tensor,
    quantize_codes,
    ste_backward,
    unpack,
    unpack_codes,
)

N_TENSORS = 10_000
BITS = (2, 4, 8, 16)


def random_tensors(seed, n=N_TENSORS):
    """Seeded stream of small float32 tensors with varied scale, offset and bit-width."""
    rng = np.random.default_rng(seed)
    for _ in range(n):
        size = int(rng.integers(1, 24))
        scale = 10.0 ** rng.uniform(-3, 3)
        v = (rng.standard_normal(size) * scale + rng.uniform(-2, 2) * scale).astype(np.float32)
        yield v, int(rng.choice(BITS))


# -- worked examples ---------------------------------------------------------


def test_compute_range_examples():
    assert compute_range([0.0, 0.5, 1.0]) == QuantRange(1.0, 0.0)
    r = compute_range([3.5, 3.5, 3.5])
    assert (r.alpha, r.beta) == (0.0, 3.5)
    assert compute_range([-2.0, 0.0, 2.0]) == QuantRange(4.0, -2.0)


def test_compute_range_errors():
    with pytest.raises(ArgumentError):
        compute_range(np.array([], dtype=np.float32))
    with pytest.raises(ArgumentError):
        compute_range([1.0, np.nan])


def test_two_bit_unit_range():
    out = fake_quantize(np.array([0.0, 0.5, 1.0], dtype=np.float32), 2, QuantRange(1.0, 0.0))
    assert np.array_equal(out, np.float32([0.0, 2.0 / 3.0, 1.0]))


def test_one_bit_symmetric():
    out = fake_quantize(np.array([-2.0, 0.0, 2.0], dtype=np.float32), 1, QuantRange(4.0, -2.0))
    assert np.array_equal(out, [-2.0, 2.0, 2.0])


def test_constant_tensor_unchanged():
    v = np.full(5, 1.25, dtype=np.float32)
    assert np.array_equal(fake_quantize(v, 4), v)


def test_out_of_range_clamped():
    out = fake_quantize(np.float32([-5.0, 0.25, 9.0]), 8, UNIT_RANGE)
    assert out[0] == 0.0 and out[2] == 1.0


def test_output_dtype_follows_input():
    assert fake_quantize(np.float64([0.1, 0.7]), 4).dtype == np.float64
    assert fake_quantize(np.float32([0.1, 0.7]), 4).dtype == np.float32


def test_fixed_ranges_do_not_contain_midpoints():
    # 2**n - 1 levels is odd, so 0.5 (sigmoid) and 0 (tanh) fall between lattice points
    for bits in (4, 8, 16):
        L = (1 << bits) - 1
        half = fake_quantize(np.float64([0.5]), bits, UNIT_RANGE)[0]
        zero = fake_quantize(np.float64([0.0]), bits, SYMMETRIC_RANGE)[0]
        assert half == pytest.approx((L + 1) // 2 / L, abs=1e-15)
        assert zero == pytest.approx(-1.0 + 2.0 * ((L + 1) // 2) / L, abs=1e-15)
        assert abs(half - 0.5) == pytest.approx(0.5 / L)


def test_quant_spec_validation():
    assert QuantSpec(4).levels == 15
    for bad in (0, 17, 2.5):
        with pytest.raises(ArgumentError):
            QuantSpec(bad)
    with pytest.raises(ArgumentError):
        QuantSpec(4, rounding="nearest-even")


def test_invalid_range_rejected():
    with pytest.raises(ArgumentError):
        fake_quantize(np.float32([1.0]), 4, QuantRange(-1.0, 0.0))


def test_rounding_half_away_from_zero_exactly():
    # 0.5 * 3 = 1.5 exactly: rounds up to code 2 (floor(x + 0.5) would agree, banker's would not)
    assert quantize_codes(np.float64([0.5]), 2, UNIT_RANGE)[0] == 2
    # 2.5/3 * 3 is a hair under 2.5 in binary; the exact test keeps code 2
    x = np.float64(2.5) / 3
    assert quantize_codes(np.float64([x]), 2, UNIT_RANGE)[0] == (3 if x * 3 >= 2.5 else 2)


# -- properties over 10^4 seeded tensors ----------------------------------------


def test_property_idempotence():
    for v, bits in random_tensors(1):
        r = compute_range(v)
        once = fake_quantize(v, bits, r)
        assert np.array_equal(fake_quantize(once, bits, r), once)


def test_property_lattice_membership():
    for v, bits in random_tensors(2):
        r = compute_range(v)
        out = fake_quantize(v, bits, r)
        if r.alpha == 0:
            assert np.array_equal(out, v)
            continue
        L = (1 << bits) - 1
        alpha, beta = Fraction(r.alpha), Fraction(r.beta)
        for y in out.tolist():
            k = round((Fraction(y) - beta) / alpha * L)
            assert 0 <= k <= L
            exact = beta + alpha * k / L
            # the only slack allowed is the final rounding to float32
            assert abs(Fraction(y) - exact) <= Fraction(abs(float(np.spacing(np.float32(y))))), (y, k, bits)


def test_property_monotonic():
    for v, bits in random_tensors(3):
        s = np.sort(v)
        out = fake_quantize(s, bits, compute_range(v))
        assert np.all(np.diff(out.astype(np.float64)) >= 0)


def test_property_half_step_error_bound():
    for v, bits in random_tensors(4):
        r = compute_range(v)
        if r.alpha == 0:
            continue
        L = (1 << bits) - 1
        err = np.abs(v.astype(np.float64) - fake_quantize(v, bits, r).astype(np.float64))
        # half a lattice step plus one float32 rounding of the output
        slack = np.spacing(np.abs(v).max().astype(np.float32)).astype(np.float64)
        assert np.all(err <= r.alpha / (2 * L) + slack)


def test_property_endpoint_preservation():
    for v, bits in random_tensors(5):
        r = compute_range(v)
        ends = np.float32([r.beta, np.float32(r.beta) + np.float32(r.alpha)])
        assert np.array_equal(fake_quantize(ends, bits, r), ends)


def test_property_ste_identity():
    for v, _ in random_tensors(6):
        g = v * np.float32(0.5)
        assert ste_backward(g) is g
    assert ste_backward(0) == 0
    assert np.array_equal(ste_backward(np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.floats(-1e4, 1e4, width=32), min_size=1, max_size=40),
    st.sampled_from(BITS),
)
def test_hypothesis_idempotent_and_bounded(values, bits):
    v = np.array(values, dtype=np.float32)
    r = compute_range(v)
    q = fake_quantize(v, bits, r)
    assert np.array_equal(fake_quantize(q, bits, r), q)
    assert q.min() >= r.low and q.max() <= np.float32(r.high)


# -- backends ---------------------------------------------------------------------


def test_backends_bit_identical():
    rng = np.random.default_rng(9)
    for trial in range(200):
        bits = int(rng.choice(BITS))
        L = (1 << bits) - 1
        v = (rng.standard_normal((7, 13)) * 10.0 ** rng.uniform(-2, 2)).astype(np.float32)
        if trial % 10 == 0:
            v[2] = v[2, 0]  # a constant row
        lo, hi = float(v.min()), float(v.max())
        a = np.float32(hi) - np.float32(lo)
        for name in ("fq_range", "codes_range"):
            np_out = getattr(kernels.numpy_impl, name)(v, lo, float(a), L)
            nb_out = getattr(kernels.numba_impl, name)(v, lo, float(a), L)
            assert np_out.dtype == nb_out.dtype and np.array_equal(np_out, nb_out)
        assert np.array_equal(kernels.numpy_impl.fq_rows(v, L), kernels.numba_impl.fq_rows(v, L))
        codes = rng.integers(0, L + 1, size=int(rng.integers(1, 50))).astype(np.uint32)
        p_np = kernels.numpy_impl.pack(codes, bits)
        p_nb = kernels.numba_impl.pack(codes, bits)
        assert p_np.tobytes() == p_nb.tobytes()
        assert np.array_equal(kernels.numpy_impl.unpack(p_np, bits, codes.size), codes)
        assert np.array_equal(kernels.numba_impl.unpack(p_np, bits, codes.size), codes)


def test_rows_use_one_range_per_row():
    x = np.array([[0.0, 1.0, 0.5], [10.0, 20.0, 14.0]], dtype=np.float32)
    out = Quantizer(2).rows(x)
    assert np.array_equal(out[0], fake_quantize(x[0], 2))
    assert np.array_equal(out[1], fake_quantize(x[1], 2))


# -- quantizer objects -----------------------------------------------------------


def test_quantizer_cell_uses_its_own_bits():
    q = Quantizer(4)
    assert q.cell_spec.bits == 16
    c = np.linspace(-3, 3, 37, dtype=np.float32)[None]
    assert np.array_equal(q.cell(c), fake_quantize(c[0], 16)[None])
    assert np.array_equal(Quantizer(4, cell_bits=4).cell(c), fake_quantize(c[0], 4)[None])


def test_quantizer_fixed_activation_ranges():
    q = Quantizer(4)
    s = np.float32([0.0, 0.2, 0.5, 1.0])
    t = np.float32([-1.0, -0.3, 0.0, 1.0])
    assert np.array_equal(q.sigmoid_out(s), fake_quantize(s, 4, UNIT_RANGE))
    assert np.array_equal(q.tanh_out(t), fake_quantize(t, 4, SYMMETRIC_RANGE))


def test_quantizer_static_weight_range():
    w = np.float32([0.0, 0.3, 0.6])
    fixed = QuantRange(2.0, -1.0)
    assert np.array_equal(Quantizer(4).weight(w, fixed), fake_quantize(w, 4, fixed))


def test_passthrough_is_identity():
    q = PassthroughQuantizer()
    x = np.float32([[0.1, 0.2]])
    for fn in (q.weight, q.rows, q.cell, q.sigmoid_out, q.tanh_out):
        assert fn(x) is x


# -- packing -----------------------------------------------------------------------


def test_pack_endpoints():
    p = pack(np.array([0, 3]), 2, (2,), UNIT_RANGE)
    assert np.array_equal(unpack(p), [0.0, 1.0])


def test_pack_payload_size():
    p = pack(np.arange(5), 4, (5,), UNIT_RANGE)
    assert len(p.payload) == 3


def test_pack_roundtrip_random_codes():
    rng = np.random.default_rng(3)
    for bits in range(1, 17):
        codes = rng.integers(0, 1 << bits, size=(3, 11))
        p = pack(codes, bits, codes.shape, UNIT_RANGE)
        assert np.array_equal(unpack_codes(p), codes)
        back, end = PackedIntTensor.from_bytes(p.to_bytes())
        assert back == p and end == len(p.to_bytes())


def test_pack_little_endian_bit_order():
    # codes 1, 2 at 4 bits -> low nibble first
    assert pack(np.array([1, 2]), 4, (2,), UNIT_RANGE).payload == bytes([0x21])


def test_pack_tensor_matches_fake_quantize():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((6, 9)).astype(np.float32)
    for bits in (4, 8, 16):
        assert np.array_equal(unpack(pack_tensor(w, bits)), fake_quantize(w, bits))


def test_dequantize_codes_lattice():
    r = QuantRange(3.0, -1.0)
    assert np.allclose(dequantize_codes([0, 1, 3], 2, r), [-1.0, 0.0, 2.0])


def test_pack_errors():
    with pytest.raises(ArgumentError):
        pack(np.array([0, 4]), 2, (2,), UNIT_RANGE)
    with pytest.raises(ArgumentError):
        pack(np.array([0, 1, 2]), 2, (2,), UNIT_RANGE)
    blob = pack(np.arange(8), 4, (8,), UNIT_RANGE).to_bytes()
    with pytest.raises(TruncationError):
        PackedIntTensor.from_bytes(blob[:-1])
    with pytest.raises(TruncationError):
        PackedIntTensor.from_bytes(blob[:5])
    with pytest.raises(FormatError):
        PackedIntTensor.from_bytes(b"\x00" + blob[1:])
