import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from birf.binarize import BinaryTensor, PackedBits, pack_bits, sign_forward, ste_backward, unpack_bits
from birf.errors import SnapshotError

finite = st.floats(-1e6, 1e6, allow_nan=False)


@pytest.mark.parametrize("theta, expect", [(0.37, 1.0), (0.0, 1.0), (-2.5, -1.0), (-0.0, 1.0)])
def test_sign_examples(theta, expect):
    assert sign_forward(np.array([theta]))[0] == expect


def test_sign_rejects_nan():
    with pytest.raises(ValueError):
        sign_forward(np.array([0.1, np.nan]))


@pytest.mark.parametrize("theta, expect", [(0.5, 0.7), (1.0, 0.7), (-1.0, 0.7), (-1.2, 0.0), (1.0000001, 0.0)])
def test_ste_examples(theta, expect):
    assert ste_backward(np.array([0.7]), np.array([theta]))[0] == expect


def test_ste_shape_mismatch():
    with pytest.raises(ValueError):
        ste_backward(np.ones(3), np.ones(2))


@given(arrays(np.float64, st.integers(0, 200), elements=finite))
def test_sign_properties(theta):
    s = sign_forward(theta)
    assert set(np.unique(s)) <= {-1.0, 1.0}
    np.testing.assert_array_equal(sign_forward(s), s)
    np.testing.assert_array_equal(sign_forward(3.5 * theta), s)


@given(arrays(np.float64, st.integers(0, 200), elements=st.floats(-3, 3)), st.floats(-5, 5))
def test_ste_mask_property(theta, g):
    up = np.full(theta.shape, g)
    out = ste_backward(up, theta)
    inside = np.abs(theta) <= 1
    np.testing.assert_array_equal(out[inside], up[inside])
    assert not out[~inside].any()


def test_pack_examples():
    assert pack_bits(np.array([1, -1, -1, 1, 1, 1, -1, 1])).data == bytes([0xB9])
    empty = pack_bits(np.array([]))
    assert empty.bit_count == 0 and empty.data == b""
    nine = pack_bits(np.ones(9))
    assert nine.data == bytes([0xFF, 0x01])


def test_pack_rejects_non_sign_values():
    with pytest.raises(ValueError):
        pack_bits(np.array([1, 0, -1]))


def test_unpack_examples():
    np.testing.assert_array_equal(unpack_bits(PackedBits(1, b"\x01")), [1])
    np.testing.assert_array_equal(unpack_bits(PackedBits(3, b"\x00")), [-1, -1, -1])


def test_packed_length_mismatch():
    with pytest.raises(SnapshotError):
        PackedBits(9, b"\x00")
    with pytest.raises(SnapshotError):
        PackedBits(3, b"\x00\x00")


@given(st.integers(0, 2000), st.integers(0, 2**32 - 1))
def test_pack_roundtrip_property(n, seed):
    s = np.random.default_rng(seed).choice([-1.0, 1.0], n)
    p = pack_bits(s)
    assert len(p.data) == (n + 7) // 8
    np.testing.assert_array_equal(unpack_bits(p), s)


def test_binary_tensor_uniform_init_inside_passband():
    t = BinaryTensor.uniform("g", (1000, 2), np.random.default_rng(0))
    assert np.abs(t.latent).max() <= 1e-4
    assert (t.signs() > 0).any() and (t.signs() < 0).any()
    assert t.values is t.latent and t.grads.dtype == np.float64
