"""Reverse-mode correctness: tape semantics and finite-difference checks."""

import numpy as np
import pytest

from wavecontrast import ops
from wavecontrast.engine import Parameter, ShapeError, Tape, Tensor, set_gradient_corruption
from wavecontrast.gradcheck import grad_check


def p64(name, rng, shape, scale=1.0):
    return Parameter(name, rng.normal(size=shape) * scale)


class TestTapeSemantics:
    def test_sum_gradient_all_ones(self):
        w = Parameter("w", np.array([1.0, -2.0, 3.0]))
        with Tape() as tape:
            loss = ops.tensor_sum(w)
            grads = tape.backward(loss, [w])
        np.testing.assert_array_equal(grads["w"], np.ones(3))

    def test_squared_norm_gradient(self):
        w = Parameter("w", np.array([1.0, -2.0, 3.0]))
        with Tape() as tape:
            loss = ops.tensor_sum(ops.square(w))
            grads = tape.backward(loss, [w])
        np.testing.assert_allclose(grads["w"], 2.0 * w.data)

    def test_unreached_parameter_gets_zeros(self):
        w = Parameter("w", np.ones(3))
        other = Parameter("other", np.ones((2, 2)))
        with Tape() as tape:
            loss = ops.tensor_sum(w)
            grads = tape.backward(loss, [w, other])
        np.testing.assert_array_equal(grads["other"], np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        w = Parameter("w", np.ones(3))
        with Tape() as tape:
            y = ops.square(w)
            with pytest.raises(ShapeError):
                tape.backward(y, [w])

    def test_reuse_accumulates_via_fanout(self):
        # w feeds the loss twice; gradient must be the sum of both paths.
        w = Parameter("w", np.array([2.0]))
        with Tape() as tape:
            loss = ops.tensor_sum(ops.add(ops.square(w), ops.scale(w, 3.0)))
            grads = tape.backward(loss, [w])
        np.testing.assert_allclose(grads["w"], [2.0 * 2.0 + 3.0])

    def test_no_recording_without_tape(self):
        w = Parameter("w", np.ones(4))
        y = ops.square(w)
        assert y.requires_grad
        with Tape() as tape:
            pass
        assert len(tape) == 0

    def test_backward_twice_is_stable(self):
        w = Parameter("w", np.array([1.5, -0.5]))
        with Tape() as tape:
            loss = ops.tensor_sum(ops.square(w))
            g1 = tape.backward(loss, [w])["w"].copy()
            g2 = tape.backward(loss, [w])["w"]
        np.testing.assert_array_equal(g1, g2)


class TestDeterminism:
    def test_bit_identical_forward_backward(self):
        def run():
            rng = np.random.default_rng(123)
            x = Tensor(rng.normal(size=(2, 20, 3)).astype(np.float32))
            k = Parameter("k", rng.normal(size=(5, 3, 4)).astype(np.float32))
            b = Parameter("b", np.zeros(4, dtype=np.float32))
            with Tape() as tape:
                y = ops.mish(ops.conv1d(x, k, b))
                y = ops.max_pool(y, 2, dims=1)
                loss = ops.tensor_mean(ops.square(y))
                grads = tape.backward(loss, [k, b])
            return loss.data.copy(), {n: g.copy() for n, g in grads.items()}

        l1, g1 = run()
        l2, g2 = run()
        assert l1.tobytes() == l2.tobytes()
        for name in g1:
            assert g1[name].tobytes() == g2[name].tobytes()


def _check(forward, params, tol=1e-4):
    report = grad_check(forward, params, tolerance=tol)
    assert report.passed, "\n".join(report.lines())
    return report


class TestGradCheckPerOp:
    """Every differentiable op passes at 1e-4 in 64-bit over >= 10 seeds."""

    SEEDS = range(10)

    def test_dense_tight(self):
        rng = np.random.default_rng(0)
        w = p64("w", rng, (6, 4))
        b = p64("b", rng, (4,))
        x = Tensor(rng.normal(size=(3, 6)))
        report = grad_check(lambda: ops.tensor_mean(ops.square(ops.dense(x, w, b))), [w, b], tolerance=1e-6)
        assert report.passed, "\n".join(report.lines())

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv1d(self, seed):
        rng = np.random.default_rng(seed)
        k = p64("k", rng, (4, 2, 3))
        b = p64("b", rng, (3,))
        x = Tensor(rng.normal(size=(2, 12, 2)))
        _check(lambda: ops.tensor_mean(ops.square(ops.conv1d(x, k, b, padding="same"))), [k, b])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv2d(self, seed):
        rng = np.random.default_rng(seed + 100)
        k = p64("k", rng, (3, 3, 2, 2))
        b = p64("b", rng, (2,))
        x = Tensor(rng.normal(size=(2, 6, 7, 2)))
        _check(lambda: ops.tensor_mean(ops.square(ops.conv2d(x, k, b, padding="same"))), [k, b])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv_strided_valid(self, seed):
        rng = np.random.default_rng(seed + 200)
        k = p64("k", rng, (3, 1, 2))
        b = p64("b", rng, (2,))
        x = Tensor(rng.normal(size=(1, 11, 1)))
        _check(lambda: ops.tensor_mean(ops.square(ops.conv1d(x, k, b, stride=2, padding="valid"))), [k, b])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mish(self, seed):
        rng = np.random.default_rng(seed + 300)
        w = p64("w", rng, (17,), scale=3.0)
        _check(lambda: ops.tensor_sum(ops.mish(w)), [w])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_maxpool_through_input(self, seed):
        rng = np.random.default_rng(seed + 400)
        w = p64("w", rng, (1, 12, 2))
        _check(lambda: ops.tensor_mean(ops.square(ops.max_pool(w, 2, dims=1))), [w])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_sqrt_square_chain(self, seed):
        rng = np.random.default_rng(seed + 500)
        w = p64("w", rng, (3, 5))
        z = Tensor(rng.normal(size=(3, 5)))

        def forward():
            d = ops.sub(w, z)
            return ops.tensor_mean(ops.sqrt(ops.tensor_sum(ops.square(d), axis=1)))

        _check(forward, [w])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu_margin(self, seed):
        rng = np.random.default_rng(seed + 600)
        w = p64("w", rng, (8,), scale=0.7)
        _check(lambda: ops.tensor_sum(ops.square(ops.relu(ops.add_scalar(ops.neg(w), 0.9)))), [w])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax_cross_entropy(self, seed):
        rng = np.random.default_rng(seed + 700)
        w = p64("w", rng, (5, 4))
        labels = rng.integers(0, 4, size=5)
        _check(lambda: ops.softmax_cross_entropy(w, labels), [w])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mse(self, seed):
        rng = np.random.default_rng(seed + 800)
        w = p64("w", rng, (4, 6))
        target = rng.normal(size=(4, 6))
        _check(lambda: ops.mse_loss(w, target), [w])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_upsample(self, seed):
        rng = np.random.default_rng(seed + 900)
        w = p64("w", rng, (1, 5, 2))
        _check(lambda: ops.tensor_mean(ops.square(ops.upsample_nearest(w, 2, dims=1))), [w])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_concat_reshape_gap(self, seed):
        rng = np.random.default_rng(seed + 1000)
        a = p64("a", rng, (2, 4, 3))
        b = p64("b", rng, (2, 4, 2))

        def forward():
            merged = ops.concat([a, b], axis=2)
            return ops.tensor_sum(ops.square(ops.global_average_pool(merged)))

        _check(forward, [a, b])


class TestCompositeStack:
    def test_conv2d_mish_maxpool_stack(self):
        rng = np.random.default_rng(2024)
        k1 = p64("k1", rng, (3, 3, 1, 4), scale=0.5)
        b1 = p64("b1", rng, (4,), scale=0.1)
        k2 = p64("k2", rng, (3, 3, 4, 3), scale=0.5)
        b2 = p64("b2", rng, (3,), scale=0.1)
        x = Tensor(rng.normal(size=(2, 8, 8, 1)))

        def forward():
            h = ops.max_pool(ops.mish(ops.conv2d(x, k1, b1)), 2, dims=2)
            h = ops.mish(ops.conv2d(h, k2, b2))
            return ops.tensor_mean(ops.square(ops.global_average_pool(h)))

        _check(forward, [k1, b1, k2, b2])

    def test_negative_control_corrupted_gradient_flagged(self):
        rng = np.random.default_rng(99)
        w = p64("w", rng, (6, 4))
        b = p64("b", rng, (4,))
        x = Tensor(rng.normal(size=(3, 6)))
        set_gradient_corruption(True)
        try:
            report = grad_check(
                lambda: ops.tensor_mean(ops.square(ops.dense(x, w, b))), [w, b], tolerance=1e-4
            )
        finally:
            set_gradient_corruption(False)
        assert not report.passed
        assert report.failures
