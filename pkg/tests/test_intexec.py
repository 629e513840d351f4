import numpy as np
import pytest
from hypothesis import given, strategies as st

from qatlab.intexec import check_accumulator, dense_fp16_bytes, dequantize, int_linear, pack, pack_nibbles, unpack_nibbles
from qatlab.quantizer import compute_qparams, fake_quantize
from qatlab.tensor import Tensor
from qatlab.toydiff.layers import quantized_linear_forward


def test_nibble_layout_example():
    assert pack_nibbles(np.array([3, 1])).tolist() == [0x13]
    assert pack_nibbles(np.array([15, 0, 7])).tolist() == [0x0F, 0x07]


def test_nibble_rejects_out_of_range():
    with pytest.raises(ValueError):
        pack_nibbles(np.array([16]))


def test_round_trip_10000_weights():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(100, 100))
    q = compute_qparams(W, 4, "channel")
    p = pack(W, q)
    codes = p.unpack()
    assert codes.min() >= 0 and codes.max() <= 15
    assert np.array_equal(pack(dequantize(p), q).codes, p.codes)
    assert np.array_equal(unpack_nibbles(pack_nibbles(codes), codes.size).reshape(codes.shape), codes)


@given(st.lists(st.integers(0, 15), min_size=0, max_size=33))
def test_nibble_round_trip_property(codes):
    a = np.array(codes, dtype=np.int64)
    assert unpack_nibbles(pack_nibbles(a), a.size).tolist() == codes


def test_on_grid_weights_dequantize_exactly():
    W = np.random.default_rng(1).normal(size=(8, 6))
    q = compute_qparams(W, 4, "channel")
    Wq = fake_quantize(W, q).data
    assert np.array_equal(dequantize(pack(Wq, q)), Wq)


@pytest.mark.parametrize("bits", [2, 3, 8])
def test_other_bit_widths_round_trip(bits):
    W = np.random.default_rng(bits).normal(size=(5, 7))
    q = compute_qparams(W, bits, "channel")
    assert np.array_equal(dequantize(pack(W, q)), fake_quantize(W, q).data)


def test_rejects_wide_codes():
    W = np.ones((2, 2))
    with pytest.raises(ValueError):
        pack(W, compute_qparams(W, 9, "channel"))


def test_hand_example_one_by_one():
    qw = compute_qparams(np.array([[2.0]]), 4, "channel")
    qw.scale.data[:] = 1.0
    qw.zero[:] = 0
    qa = compute_qparams(np.array([[3.0]]), 4, "token")
    qa.scale.data[:] = 1.0
    qa.zero[:] = 0
    assert int_linear(pack(np.array([[2.0]]), qw), np.array([[3.0]]), qa).tolist() == [[6.0]]


def test_zero_activations():
    W = np.random.default_rng(2).normal(size=(4, 3))
    out = int_linear(pack(W, compute_qparams(W, 4, "channel")), np.zeros((3, 5)))
    assert np.all(out == 0.0)


@pytest.mark.parametrize("seed", range(100))
def test_bit_exact_against_training_path(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(64, 64))
    X = rng.normal(size=(64, 16)) * rng.uniform(0.1, 3.0)
    q = compute_qparams(W, 4, "channel", learnable=True)
    q.scale.data *= rng.uniform(0.8, 1.2, size=q.scale.shape)  # learned scales are arbitrary floats
    ref = quantized_linear_forward(Tensor(X), Tensor(W), q, 4).data
    assert np.max(np.abs(int_linear(pack(W, q), X) - ref)) == 0.0


def test_shape_and_overflow_checks():
    W = np.ones((2, 3))
    p = pack(W, compute_qparams(W, 4, "channel"))
    with pytest.raises(ValueError):
        int_linear(p, np.ones((4, 1)))
    check_accumulator(15, 15, 64)
    with pytest.raises(OverflowError):
        check_accumulator(255, 255, 2**47)


def test_size_accounting_bound():
    W = np.random.default_rng(3).normal(size=(64, 64))
    p = pack(W, compute_qparams(W, 4, "channel"))
    assert p.codes.nbytes == 64 * 64 * 4 // 8
    assert p.payload_bytes <= p.codes.nbytes + 64 * (8 + 1)
    assert dense_fp16_bytes(64, 64) == 8192
