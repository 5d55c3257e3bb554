"""Forward-pass oracles and shape/error behaviour for the primitive ops."""

import numpy as np
import pytest

from wavecontrast import ops
from wavecontrast.engine import NonFiniteError, Parameter, ShapeError, Tensor


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


class TestTensorBasics:
    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, np.nan]))
        with pytest.raises(NonFiniteError):
            Tensor(np.array([np.inf]))

    def test_default_dtype_is_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_mixed_dtype_rejected(self):
        a = Tensor(np.zeros(3, dtype=np.float32))
        b = Tensor(np.zeros(3, dtype=np.float64))
        with pytest.raises(ShapeError):
            ops.add(a, b)


class TestConv1d:
    def test_identity_kernel(self):
        x = t64(np.array([[1.0], [2.0], [3.0]]))
        k = t64(np.array([0.0, 1.0, 0.0]).reshape(3, 1, 1))
        b = t64(np.zeros(1))
        y = ops.conv1d(x, k, b, stride=1, padding="same")
        np.testing.assert_allclose(y.data.ravel(), [1.0, 2.0, 3.0])

    def test_hand_oracle_valid(self):
        x = t64(np.array([[1.0], [2.0], [3.0], [4.0]]))
        k = t64(np.ones((2, 1, 1)))
        b = t64(np.zeros(1))
        y = ops.conv1d(x, k, b, stride=1, padding="valid")
        np.testing.assert_allclose(y.data.ravel(), [3.0, 5.0, 7.0])

    def test_zero_input_gives_bias(self):
        x = t64(np.zeros((8, 2)))
        k = t64(np.random.default_rng(0).normal(size=(3, 2, 4)))
        b = t64(np.array([1.0, -2.0, 0.5, 3.0]))
        y = ops.conv1d(x, k, b, padding="same")
        assert y.data.shape == (8, 4)
        np.testing.assert_allclose(y.data, np.broadcast_to(b.data, (8, 4)))

    def test_same_preserves_length_stride1(self):
        for klen in (2, 3, 4, 5, 10):
            x = t64(np.random.default_rng(klen).normal(size=(40, 3)))
            k = t64(np.random.default_rng(klen + 1).normal(size=(klen, 3, 5)))
            b = t64(np.zeros(5))
            assert ops.conv1d(x, k, b, padding="same").data.shape == (40, 5)

    def test_channel_mismatch_raises(self):
        x = t64(np.zeros((8, 2)))
        k = t64(np.zeros((3, 4, 5)))
        b = t64(np.zeros(5))
        with pytest.raises(ShapeError):
            ops.conv1d(x, k, b)

    def test_kernel_longer_than_input_raises(self):
        x = t64(np.zeros((2, 1)))
        k = t64(np.zeros((5, 1, 1)))
        b = t64(np.zeros(1))
        with pytest.raises(ShapeError):
            ops.conv1d(x, k, b, padding="valid")


class TestConv2d:
    def test_unit_1x1_kernel(self):
        x = t64(np.arange(9.0).reshape(3, 3, 1))
        k = t64(np.ones((1, 1, 1, 1)))
        b = t64(np.zeros(1))
        y = ops.conv2d(x, k, b, padding="valid")
        np.testing.assert_allclose(y.data, x.data)

    def test_ones_oracle(self):
        x = t64(np.ones((3, 3, 1)))
        k = t64(np.ones((2, 2, 1, 1)))
        b = t64(np.zeros(1))
        y = ops.conv2d(x, k, b, padding="valid")
        np.testing.assert_allclose(y.data, np.full((2, 2, 1), 4.0))

    def test_bias_only_on_zero_input(self):
        x = t64(np.zeros((5, 6, 2)))
        k = t64(np.random.default_rng(1).normal(size=(3, 3, 2, 3)))
        b = t64(np.array([2.0, -1.0, 0.25]))
        y = ops.conv2d(x, k, b, padding="same")
        assert y.data.shape == (5, 6, 3)
        np.testing.assert_allclose(y.data, np.broadcast_to(b.data, (5, 6, 3)))


class TestMaxPool:
    def test_basic_window(self):
        x = t64(np.array([[1.0], [3.0], [2.0], [5.0]]))
        y = ops.max_pool(x, window=2, dims=1)
        np.testing.assert_allclose(y.data.ravel(), [3.0, 5.0])

    def test_drop_remainder(self):
        x = t64(np.array([[1.0], [2.0], [3.0]]))
        y = ops.max_pool(x, window=2, dims=1)
        np.testing.assert_allclose(y.data.ravel(), [2.0])

    def test_tie_routes_to_first(self):
        x = Parameter("x", np.full((1, 4, 1), 7.0, dtype=np.float64))
        from wavecontrast.engine import Tape

        with Tape() as tape:
            y = ops.max_pool(x, window=2, dims=1)
            loss = ops.tensor_sum(y)
            grads = tape.backward(loss, [x])
        np.testing.assert_allclose(grads["x"].ravel(), [1.0, 0.0, 1.0, 0.0])

    def test_2d_pool(self):
        x = t64(np.arange(16.0).reshape(4, 4, 1))
        y = ops.max_pool(x, window=2, dims=2)
        np.testing.assert_allclose(y.data.ravel(), [5.0, 7.0, 13.0, 15.0])


class TestDense:
    def test_identity(self):
        x = t64(np.array([3.0, -1.0]))
        w = t64(np.eye(2))
        b = t64(np.zeros(2))
        np.testing.assert_allclose(ops.dense(x, w, b).data, x.data)

    def test_matvec_oracle(self):
        x = t64(np.array([1.0, 2.0]))
        w = t64(np.array([[1.0, 0.0], [0.0, 3.0]]))
        b = t64(np.array([1.0, 1.0]))
        np.testing.assert_allclose(ops.dense(x, w, b).data, [2.0, 7.0])

    def test_zero_input_gives_bias(self):
        x = t64(np.zeros((4, 3)))
        w = t64(np.random.default_rng(2).normal(size=(3, 5)))
        b = t64(np.arange(5.0))
        np.testing.assert_allclose(ops.dense(x, w, b).data, np.broadcast_to(b.data, (4, 5)))

    def test_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ops.dense(t64(np.zeros(3)), t64(np.zeros((4, 2))), t64(np.zeros(2)))


class TestMish:
    def test_zero(self):
        assert ops.mish(t64(0.0)).item() == 0.0

    def test_reference_value(self):
        # x * tanh(ln(1 + e^x)) at x=1, evaluated in high precision.
        got = ops.mish(t64(1.0)).item()
        want = 1.0 * np.tanh(np.log1p(np.e))
        assert abs(got - want) < 1e-12
        assert abs(got - 0.865098) < 1e-6

    def test_asymptote(self):
        assert abs(ops.mish(t64(20.0)).item() - 20.0) < 1e-6

    def test_lower_bound_and_monotone_nonneg(self):
        xs = np.linspace(-60.0, 60.0, 20001)
        ys = ops.mish(t64(xs)).data
        assert np.all(ys > -0.309)
        pos = ys[xs >= 0]
        assert np.all(np.diff(pos) >= 0)

    def test_stable_far_from_origin(self):
        ys = ops.mish(t64(np.array([-1e4, 1e4]))).data
        assert np.isfinite(ys).all()


class TestDropout:
    def test_rate_zero_identity(self):
        x = t64(np.random.default_rng(3).normal(size=(10, 4)))
        y = ops.dropout(x, 0.0, rng=np.random.default_rng(0), training=True)
        assert y is x

    def test_inference_identity(self):
        x = t64(np.random.default_rng(4).normal(size=(10, 4)))
        y = ops.dropout(x, 0.5, training=False)
        assert y is x

    def test_reproducible_mask_and_survivor_fraction(self):
        x = Tensor(np.ones(100_000, dtype=np.float64))
        y1 = ops.dropout(x, 0.1, rng=np.random.default_rng(42), training=True)
        y2 = ops.dropout(x, 0.1, rng=np.random.default_rng(42), training=True)
        np.testing.assert_array_equal(y1.data, y2.data)
        frac = np.count_nonzero(y1.data) / y1.size
        sigma = np.sqrt(0.1 * 0.9 / y1.size)
        assert abs(frac - 0.9) < 3 * sigma
        # Survivors are scaled to keep the expectation unchanged.
        np.testing.assert_allclose(y1.data[y1.data != 0], 1.0 / 0.9)

    def test_bad_rate_rejected(self):
        x = t64(np.ones(3))
        with pytest.raises(ValueError):
            ops.dropout(x, 1.0, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            ops.dropout(x, -0.1, rng=np.random.default_rng(0))


class TestLinearity:
    """conv/dense are linear in the input at fixed parameters (32-bit)."""

    @staticmethod
    def _rel(a, b):
        return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)

    def test_conv1d_linear(self):
        rng = np.random.default_rng(7)
        k = Tensor(rng.normal(size=(6, 2, 3)).astype(np.float32))
        b = Tensor(np.zeros(3, dtype=np.float32))
        x1 = Tensor(rng.normal(size=(30, 2)).astype(np.float32))
        x2 = Tensor(rng.normal(size=(30, 2)).astype(np.float32))
        mix = Tensor(2.5 * x1.data - 0.5 * x2.data)
        lhs = ops.conv1d(mix, k, b).data
        rhs = 2.5 * ops.conv1d(x1, k, b).data - 0.5 * ops.conv1d(x2, k, b).data
        assert self._rel(lhs, rhs).max() < 1e-6 * 10

    def test_dense_linear(self):
        rng = np.random.default_rng(8)
        w = Tensor(rng.normal(size=(12, 5)).astype(np.float32))
        b = Tensor(np.zeros(5, dtype=np.float32))
        x1 = Tensor(rng.normal(size=(4, 12)).astype(np.float32))
        x2 = Tensor(rng.normal(size=(4, 12)).astype(np.float32))
        mix = Tensor(1.5 * x1.data + 0.25 * x2.data)
        lhs = ops.dense(mix, w, b).data
        rhs = 1.5 * ops.dense(x1, w, b).data + 0.25 * ops.dense(x2, w, b).data
        assert self._rel(lhs, rhs).max() < 1e-6 * 10


class TestFusedLosses:
    def test_softmax_ce_uniform(self):
        logits = t64(np.zeros((3, 4)))
        loss = ops.softmax_cross_entropy(logits, np.array([0, 1, 2]))
        assert abs(loss.item() - np.log(4.0)) < 1e-12

    def test_mse_zero_on_match(self):
        pred = t64(np.arange(6.0).reshape(2, 3))
        assert ops.mse_loss(pred, pred.data.copy()).item() == 0.0

    def test_mse_hand_value(self):
        pred = t64(np.array([1.0, 2.0]))
        loss = ops.mse_loss(pred, np.array([0.0, 0.0]))
        assert abs(loss.item() - 2.5) < 1e-12


class TestResampling:
    def test_upsample1d_inverts_shape_of_pool(self):
        x = t64(np.random.default_rng(9).normal(size=(1, 8, 2)))
        up = ops.upsample_nearest(x, 2, dims=1)
        assert up.data.shape == (1, 16, 2)
        np.testing.assert_allclose(up.data[0, 0], up.data[0, 1])

    def test_upsample2d(self):
        x = t64(np.arange(4.0).reshape(1, 2, 2, 1))
        up = ops.upsample_nearest(x, 2, dims=2)
        assert up.data.shape == (1, 4, 4, 1)
        np.testing.assert_allclose(up.data[0, :2, :2, 0], 0.0)
