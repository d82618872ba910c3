import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nxnflow.errors import ShapeError
from nxnflow.tensor import Rng, channel_affine, channel_matmul, lu_slogdet


def brute_force_det(a):
    """Cofactor expansion along the first row; independent of the LU path."""
    n = a.shape[0]
    if n == 1:
        return a[0, 0]
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(a, 0, axis=0), j, axis=1)
        total += ((-1) ** j) * a[0, j] * brute_force_det(minor)
    return total


class TestChannelAffine:
    def test_identity(self):
        x = Rng(0).normal((2, 3, 4, 4))
        out = channel_affine(x, np.ones(3), np.zeros(3))
        np.testing.assert_array_equal(out, x)

    def test_hand_value(self):
        x = np.full((1, 2, 2, 2), 2.0)
        out = channel_affine(x, np.array([3.0, 1.0]), np.array([1.0, 0.0]))
        assert np.all(out[:, 0] == 7.0)
        assert np.all(out[:, 1] == 2.0)

    def test_negation_involution(self):
        x = Rng(1).normal((2, 3, 2, 2))
        once = channel_affine(x, -np.ones(3), np.zeros(3))
        twice = channel_affine(once, -np.ones(3), np.zeros(3))
        np.testing.assert_array_equal(twice, x)

    def test_rank2(self):
        x = np.array([[1.0, 2.0]])
        out = channel_affine(x, np.array([2.0, 3.0]), np.array([0.5, -1.0]))
        np.testing.assert_allclose(out, [[2.5, 5.0]])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            channel_affine(np.zeros((1, 3, 2, 2)), np.ones(2), np.zeros(2))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_inverse_property(self, seed):
        rng = Rng(seed)
        x = rng.normal((2, 3, 2, 2))
        scale = np.exp(rng.normal((3,)))  # |scale| >= 1e-6 guaranteed structurally
        bias = rng.normal((3,))
        y = channel_affine(x, scale, bias)
        back = channel_affine(y, 1.0 / scale, -bias / scale)
        assert np.max(np.abs(back - x)) <= 1e-12 * max(1.0, np.max(np.abs(x)))


class TestChannelMatmul:
    def test_identity(self):
        x = Rng(0).normal((2, 3, 4, 4))
        np.testing.assert_array_equal(channel_matmul(np.eye(3), x), x)

    def test_swap(self):
        x = Rng(0).normal((2, 2, 3, 3))
        out = channel_matmul(np.array([[0.0, 1.0], [1.0, 0.0]]), x)
        np.testing.assert_array_equal(out[:, 0], x[:, 1])
        np.testing.assert_array_equal(out[:, 1], x[:, 0])

    def test_scaling(self):
        x = np.ones((1, 2, 2, 2))
        out = channel_matmul(2.0 * np.eye(2), x)
        assert np.all(out == 2.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            channel_matmul(np.eye(2), np.zeros((1, 3, 2, 2)))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_composition(self, seed):
        rng = Rng(seed)
        a = rng.normal((3, 3))
        b = rng.normal((3, 3))
        x = rng.normal((2, 3, 2, 2))
        lhs = channel_matmul(a, channel_matmul(b, x))
        rhs = channel_matmul(a @ b, x)
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))


class TestLuSlogdet:
    def test_identity(self):
        assert lu_slogdet(np.eye(4)) == (1, 0.0)

    def test_permutation(self):
        sign, logabs = lu_slogdet(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert sign == -1
        assert logabs == pytest.approx(0.0, abs=1e-15)

    def test_scaled_identity(self):
        sign, logabs = lu_slogdet(2.0 * np.eye(2))
        assert sign == 1
        assert logabs == pytest.approx(math.log(4.0), rel=1e-14)

    def test_singular(self):
        sign, _ = lu_slogdet(np.array([[1.0, 2.0], [2.0, 4.0]]))
        assert sign == 0

    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6))
    @settings(max_examples=40, deadline=None)
    def test_against_cofactor_expansion(self, seed, n):
        a = Rng(seed).normal((n, n))
        ref = brute_force_det(a)
        sign, logabs = lu_slogdet(a)
        got = sign * math.exp(logabs)
        assert got == pytest.approx(ref, rel=1e-10, abs=1e-12)


class TestRng:
    def test_determinism(self):
        a = Rng(42).normal((10,))
        b = Rng(42).normal((10,))
        np.testing.assert_array_equal(a, b)

    def test_children_independent(self):
        root = Rng(7)
        a = root.child("a").normal((5,))
        b = root.child("b").normal((5,))
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, Rng(7).child("a").normal((5,)))

    def test_state_roundtrip(self):
        rng = Rng(3)
        rng.normal((7,))
        state = rng.state_json()
        expected = rng.normal((9,))
        restored = Rng.from_state_json(state)
        np.testing.assert_array_equal(restored.normal((9,)), expected)
