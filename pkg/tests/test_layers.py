import math

import numpy as np
import pytest

from nxnflow.errors import DegenerateChannelError, ShapeError, SingularMatrixError, StateError
from nxnflow.layers import (ActNorm, Coupling, Inv1x1, Shift, Squeeze, nxn_conv_forward,
                            nxn_conv_inverse, split_channels, squeeze2x2, unsplit_channels,
                            unsqueeze2x2)
from nxnflow.model import standard_normal_logp
from nxnflow.suites import LAYER_KINDS, random_layer
from nxnflow.tensor import Rng
from nxnflow.verify import numerical_jacobian


def identity_actnorm(channels):
    layer = ActNorm(channels)
    layer.initialized = True
    return layer


class TestActNorm:
    def test_identity_at_unit_params(self):
        layer = identity_actnorm(3)
        x = Rng(0).normal((2, 3, 4, 4))
        y, logdet, _ = layer.forward(x)
        np.testing.assert_array_equal(y, x)
        np.testing.assert_array_equal(logdet, 0.0)

    def test_logdet_hand_value(self):
        # C=1, gamma=e, H=W=2 -> logdet = 4
        layer = identity_actnorm(1)
        layer.log_gamma = np.array([1.0])
        _, logdet, _ = layer.forward(np.zeros((1, 1, 2, 2)))
        assert logdet[0] == pytest.approx(4.0)

    def test_uninitialized_raises(self):
        with pytest.raises(StateError):
            ActNorm(2).forward(np.zeros((1, 2, 2, 2)))

    def test_init_hand_statistics(self):
        layer = ActNorm(1)
        batch = np.array([[1.0], [3.0]])  # mu=2, sigma=1
        layer.init_from_batch(batch)
        assert np.exp(layer.log_gamma[0]) == pytest.approx(1.0)
        assert layer.beta[0] == pytest.approx(-2.0)
        y, _, _ = layer.forward(batch)
        np.testing.assert_allclose(y, [[-1.0], [1.0]])

    def test_init_fixed_point(self):
        rng = Rng(5)
        batch = rng.normal((4096, 3, 2, 2))
        layer = ActNorm(3)
        layer.init_from_batch(batch)
        np.testing.assert_allclose(np.exp(layer.log_gamma), 1.0, atol=0.05)
        np.testing.assert_allclose(layer.beta, 0.0, atol=0.05)

    def test_constant_channel_degenerate(self):
        layer = ActNorm(2)
        batch = Rng(0).normal((8, 2, 2, 2))
        batch[:, 1] = 3.0
        with pytest.raises(DegenerateChannelError):
            layer.init_from_batch(batch)

    def test_roundtrip(self):
        layer = random_layer("actnorm", 3, Rng(1))
        x = Rng(2).normal((4, 3, 4, 4))
        y, _, _ = layer.forward(x)
        assert np.max(np.abs(layer.inverse(y) - x)) <= 1e-9


class TestShift:
    def test_identity_at_init(self):
        layer = Shift(3)
        x = Rng(0).normal((2, 3, 4, 4))
        y, logdet, _ = layer.forward(x)
        np.testing.assert_array_equal(y, x)
        np.testing.assert_array_equal(logdet, 0.0)

    def test_log_reciprocal_cancellation(self):
        layer = Shift(2)
        layer.log_alpha = np.log(np.array([2.0, 0.5]))
        _, logdet, _ = layer.forward(np.zeros((1, 2, 3, 3)))
        assert logdet[0] == pytest.approx(9.0 * (math.log(2) + math.log(0.5)), abs=1e-12)

    def test_hand_forward_and_inverse(self):
        layer = Shift(1)
        layer.log_alpha = np.array([math.log(3.0)])
        layer.beta = np.array([1.0])
        y, _, _ = layer.forward(np.full((1, 1, 2, 2), 2.0))
        assert np.all(y == pytest.approx(7.0))
        np.testing.assert_allclose(layer.inverse(y), 2.0)

    def test_jacobian_is_diagonal(self):
        layer = random_layer("shift", 3, Rng(9))
        x = Rng(10).normal((3, 3, 3))
        jac = numerical_jacobian(lambda xi: layer.forward(xi[None])[0][0], x)
        off = jac.copy()
        np.fill_diagonal(off, 0.0)
        assert np.max(np.abs(off)) <= 1e-8


class TestInv1x1:
    def test_identity(self):
        layer = Inv1x1(3, Rng(0), mode="direct")
        layer.w = np.eye(3)
        x = Rng(1).normal((2, 3, 2, 2))
        y, logdet, _ = layer.forward(x)
        np.testing.assert_allclose(y, x)
        np.testing.assert_array_equal(logdet, 0.0)

    def test_channel_swap_permutation(self):
        layer = Inv1x1(2, Rng(0), mode="direct")
        layer.w = np.array([[0.0, 1.0], [1.0, 0.0]])
        x = Rng(1).normal((1, 2, 3, 4))
        y, logdet, _ = layer.forward(x)
        np.testing.assert_array_equal(y[:, 0], x[:, 1])
        assert logdet[0] == pytest.approx(0.0, abs=1e-12)

    def test_scaled_identity_logdet(self):
        layer = Inv1x1(2, Rng(0), mode="direct")
        layer.w = 2.0 * np.eye(2)
        _, logdet, _ = layer.forward(np.zeros((1, 2, 2, 2)))
        assert logdet[0] == pytest.approx(4.0 * math.log(4.0))

    def test_singular_direct_raises(self):
        layer = Inv1x1(2, Rng(0), mode="direct")
        layer.w = np.array([[1.0, 2.0], [2.0, 4.0]])
        with pytest.raises(SingularMatrixError):
            layer.forward(np.zeros((1, 2, 2, 2)))

    def test_plu_matches_direct_application(self):
        layer = random_layer("inv1x1_plu", 4, Rng(3))
        x = Rng(4).normal((2, 4, 3, 3))
        y, logdet, _ = layer.forward(x)
        w = layer.matrix
        ref = np.einsum("dc,nchw->ndhw", w, x)
        np.testing.assert_allclose(y, ref, atol=1e-12)
        sign = np.linalg.slogdet(w)
        assert logdet[0] == pytest.approx(9.0 * sign[1], rel=1e-10)

    def test_roundtrip_both_modes(self):
        for kind in ("inv1x1_plu", "inv1x1_direct"):
            layer = random_layer(kind, 4, Rng(7))
            x = Rng(8).normal((3, 4, 4, 4))
            y, _, _ = layer.forward(x)
            assert np.max(np.abs(layer.inverse(y) - x)) <= 1e-9

    def test_init_is_rotation(self):
        layer = Inv1x1(5, Rng(11), mode="plu")
        _, logdet, _ = layer.forward(np.zeros((1, 5, 2, 2)))
        assert logdet[0] == pytest.approx(0.0, abs=1e-9)


class TestCoupling:
    def test_zero_init_is_identity(self):
        layer = Coupling(4, 8, 3, Rng(0))
        x = Rng(1).normal((2, 4, 4, 4))
        y, logdet, _ = layer.forward(x)
        np.testing.assert_array_equal(y, x)
        np.testing.assert_array_equal(logdet, 0.0)

    def test_stub_conditioner_hand_values(self):
        layer = Coupling(4, 8, 3, Rng(0))
        c_a = layer.c_a

        def stub(x_b):
            shape = (x_b.shape[0], c_a) + x_b.shape[2:]
            th = np.full(shape, math.log(2.0))
            return np.exp(th), np.ones(shape), th, None

        layer._conditioner = stub
        x = Rng(1).normal((2, 4, 3, 3))
        y, logdet, _ = layer.forward(x)
        np.testing.assert_allclose(y[:, :c_a], 2.0 * x[:, :c_a] + 1.0)
        np.testing.assert_array_equal(y[:, c_a:], x[:, c_a:])
        entries = c_a * 9
        assert logdet[0] == pytest.approx(entries * math.log(2.0))
        np.testing.assert_allclose(layer.inverse(y), x, atol=1e-12)

    def test_roundtrip(self):
        layer = random_layer("coupling", 5, Rng(2))
        x = Rng(3).normal((3, 5, 4, 4))
        y, _, _ = layer.forward(x)
        assert np.max(np.abs(layer.inverse(y) - x)) <= 1e-9

    def test_rank2(self):
        layer = random_layer("coupling", 2, Rng(4), kernel=1)
        x = Rng(5).normal((6, 2))
        y, logdet, _ = layer.forward(x)
        assert y.shape == x.shape
        np.testing.assert_array_equal(y[:, 1], x[:, 1])
        assert np.max(np.abs(layer.inverse(y) - x)) <= 1e-9

    def test_too_few_channels(self):
        with pytest.raises(ShapeError):
            Coupling(1, 8, 3, Rng(0))

    def test_scale_bounded(self):
        layer = random_layer("coupling", 4, Rng(6))
        x = 100.0 * Rng(7).normal((2, 4, 4, 4))
        _, _, cache = layer.forward(x)
        assert np.all(cache["s"] >= math.exp(-1.0))
        assert np.all(cache["s"] <= math.exp(1.0))


class TestSqueezeSplit:
    def test_block_ordering(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])  # 1x1x2x2: [[a,b],[c,d]]
        y = squeeze2x2(x)
        assert y.shape == (1, 4, 1, 1)
        np.testing.assert_array_equal(y[0, :, 0, 0], [1.0, 2.0, 3.0, 4.0])

    def test_roundtrip_exact(self):
        x = Rng(0).normal((2, 3, 4, 4))
        np.testing.assert_array_equal(unsqueeze2x2(squeeze2x2(x)), x)

    def test_shape_arithmetic(self):
        assert squeeze2x2(np.zeros((1, 3, 4, 4))).shape == (1, 12, 2, 2)

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError):
            squeeze2x2(np.zeros((1, 1, 3, 4)))

    def test_squeeze_layer_logdet_zero(self):
        layer = Squeeze()
        _, logdet, _ = layer.forward(np.zeros((2, 1, 2, 2)))
        np.testing.assert_array_equal(logdet, 0.0)

    def test_split_partition_roundtrip(self):
        x = Rng(1).normal((2, 4, 2, 2))
        kept, factored = split_channels(x)
        assert kept.shape == (2, 2, 2, 2) and factored.shape == (2, 2, 2, 2)
        np.testing.assert_array_equal(unsplit_channels(kept, factored), x)

    def test_standard_normal_mode_value(self):
        z = np.zeros((1, 2, 2, 2))  # d = 8
        assert standard_normal_logp(z)[0] == pytest.approx(-4.0 * math.log(2 * math.pi))

    def test_odd_channels_rejected(self):
        with pytest.raises(ShapeError):
            split_channels(np.zeros((1, 3, 2, 2)))


class TestNxnConv:
    def test_identity_composition(self):
        shift = Shift(3)
        mix = Inv1x1(3, Rng(0), mode="direct")
        mix.w = np.eye(3)
        x = Rng(1).normal((2, 3, 4, 4))
        y, logdet, _ = nxn_conv_forward(shift, mix, x)
        np.testing.assert_allclose(y, x)
        np.testing.assert_array_equal(logdet, 0.0)

    def test_logdet_additivity(self):
        shift = random_layer("shift", 3, Rng(2))
        mix = random_layer("inv1x1_plu", 3, Rng(3))
        x = Rng(4).normal((2, 3, 4, 4))
        _, ld_total, _ = nxn_conv_forward(shift, mix, x)
        _, ld_s, _ = shift.forward(x)
        h, _, _ = shift.forward(x)
        _, ld_m, _ = mix.forward(h)
        np.testing.assert_allclose(ld_total, ld_s + ld_m, atol=1e-12)

    def test_matches_fused_affine_map(self):
        # x -> W (diag(alpha) x + beta) computed directly per pixel
        shift = random_layer("shift", 3, Rng(5))
        mix = random_layer("inv1x1_plu", 3, Rng(6))
        x = Rng(7).normal((2, 3, 4, 4))
        y, _, _ = nxn_conv_forward(shift, mix, x)
        w = mix.matrix
        alpha = np.exp(shift.log_alpha)
        fused = np.einsum("dc,nchw->ndhw",
                          w, alpha[None, :, None, None] * x
                          + shift.beta[None, :, None, None])
        assert np.max(np.abs(y - fused)) <= 1e-12 * max(1.0, np.max(np.abs(y)))

    def test_inverse(self):
        shift = random_layer("shift", 3, Rng(8))
        mix = random_layer("inv1x1_plu", 3, Rng(9))
        x = Rng(10).normal((2, 3, 4, 4))
        y, _, _ = nxn_conv_forward(shift, mix, x)
        assert np.max(np.abs(nxn_conv_inverse(shift, mix, y) - x)) <= 1e-9


class TestAllLayersRoundtrip:
    @pytest.mark.parametrize("kind", LAYER_KINDS)
    def test_logdet_antisymmetry(self, kind):
        layer = random_layer(kind, 4, Rng(20))
        x = Rng(21).normal((2, 4, 4, 4))
        y, ld_fwd, _ = layer.forward(x)
        x_rec = layer.inverse(y)
        _, ld_rec, _ = layer.forward(x_rec)
        # logdet of the inverse map is the negated forward logdet at x_rec
        np.testing.assert_allclose(ld_fwd, ld_rec, atol=1e-10)
