"""Forward-pass contracts of every tensor primitive against naive oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trojanprune.autodiff import (
    ShapeError,
    Tensor,
    batchnorm,
    conv2d,
    dense,
    global_avg_pool,
    maxpool2,
    relu,
    sgd_step,
    softmax_cross_entropy,
)


def naive_conv2d(x, w, bias=None, stride=1, padding=0):
    """Six-loop reference cross-correlation."""
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[b, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


class TestConv2d:
    def test_scalar_kernel_doubles_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.full((1, 1, 1, 1), 2.0))
        out = conv2d(x, w)
        assert out.data.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_zero_kernel_annihilates(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        w = Tensor(np.zeros((4, 3, 3, 3)))
        b = Tensor(np.zeros(4))
        out = conv2d(x, w, b, padding=1)
        np.testing.assert_array_equal(out.data, np.zeros_like(out.data))

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        got = conv2d(Tensor(x), Tensor(w)).data
        want = naive_conv2d(x, w)
        assert np.abs(got - want).max() <= 1e-6 * np.abs(want).max()

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_matches_naive_for_stride_and_padding(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.normal(size=(2, 2, 9, 9))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
        want = naive_conv2d(x, w, b, stride=stride, padding=padding)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_oversized_kernel_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_linearity_with_zero_bias(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 2, 6, 6))
        y = rng.normal(size=(1, 2, 6, 6))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        a, b = 1.7, -0.6
        lhs = conv2d(Tensor(a * x + b * y), w, padding=1).data
        rhs = a * conv2d(Tensor(x), w, padding=1).data + b * conv2d(Tensor(y), w, padding=1).data
        assert np.abs(lhs - rhs).max() <= 1e-6 * max(np.abs(rhs).max(), 1.0)


class TestBatchnorm:
    def test_standardizes_known_channel(self):
        # one channel holding [1, 2, 3]; infer stats mean 2, var 1
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 3, 1))
        out = batchnorm(x, Tensor([1.0]), Tensor([0.0]),
                        np.array([2.0]), np.array([1.0]), eps=0.0, mode="infer")
        np.testing.assert_allclose(out.data.ravel(), [-1.0, 0.0, 1.0], atol=1e-12)

    def test_zero_gamma_yields_constant_beta(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        beta = np.array([0.5, -1.0, 2.0])
        out = batchnorm(x, Tensor(np.zeros(3)), Tensor(beta),
                        np.zeros(3), np.ones(3), eps=1e-5, mode="infer")
        want = np.broadcast_to(beta[None, :, None, None], out.data.shape)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_train_mode_normalizes_batch_moments(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(2.0, 3.0, size=(4, 5, 6, 6)))
        out = batchnorm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)),
                        np.zeros(5), np.ones(5), eps=1e-12, mode="train")
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-5
        assert np.abs(var - 1.0).max() < 1e-5

    def test_train_mode_updates_running_stats_with_momentum(self):
        rng = np.random.default_rng(12)
        x = rng.normal(1.0, 2.0, size=(8, 2, 3, 3))
        rm, rv = np.zeros(2), np.ones(2)
        batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                  rm, rv, eps=1e-5, mode="train")
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-12)

    def test_negative_eps_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            batchnorm(x, Tensor([1.0]), Tensor([0.0]), np.zeros(1), np.ones(1),
                      eps=-1e-5, mode="infer")

    def test_negative_running_var_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            batchnorm(x, Tensor([1.0]), Tensor([0.0]), np.zeros(1), np.array([-1.0]),
                      eps=1e-5, mode="infer")


class TestRelu:
    def test_clips_negatives(self):
        out = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_identity_on_nonnegative(self):
        x = np.array([[0.0, 1.5], [3.0, 0.2]])
        np.testing.assert_array_equal(relu(Tensor(x)).data, x)

    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_elementwise_oracle(self, seed):
        x = np.random.default_rng(seed).normal(size=(3, 4))
        got = relu(Tensor(x)).data
        np.testing.assert_array_equal(got, np.where(x < 0, 0.0, x))


class TestMaxpool2:
    def test_single_window(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert maxpool2(x).data.ravel().tolist() == [4.0]

    def test_constant_input_halves_resolution(self):
        x = Tensor(np.full((2, 3, 4, 6), 7.0))
        out = maxpool2(x)
        assert out.data.shape == (2, 3, 2, 3)
        np.testing.assert_array_equal(out.data, np.full((2, 3, 2, 3), 7.0))

    def test_matches_naive_windowed_max(self):
        x = np.random.default_rng(5).normal(size=(1, 1, 4, 4))
        got = maxpool2(Tensor(x)).data
        want = np.zeros((1, 1, 2, 2))
        for i in range(2):
            for j in range(2):
                want[0, 0, i, j] = x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
        np.testing.assert_array_equal(got, want)

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


class TestDense:
    def test_identity_weights(self):
        x = np.random.default_rng(2).normal(size=(3, 4))
        out = dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_zero_weights_emit_bias(self):
        b = np.array([1.0, -2.0, 0.5])
        out = dense(Tensor(np.ones((4, 6))), Tensor(np.zeros((3, 6))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (4, 1)))

    def test_matches_naive_double_loop(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(4, 5))
        b = rng.normal(size=4)
        got = dense(Tensor(x), Tensor(w), Tensor(b)).data
        want = np.zeros((3, 4))
        for i in range(3):
            for k in range(4):
                want[i, k] = sum(x[i, f] * w[k, f] for f in range(5)) + b[k]
        assert np.abs(got - want).max() <= 1e-6 * np.abs(want).max()

    def test_feature_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_give_log_k(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2])
        assert float(loss.data) == np.log(4.0)

    def test_saturation_decreases_loss_monotonically(self):
        losses = []
        for v in np.linspace(0.0, 10.0, 11):
            logits = np.zeros((1, 3))
            logits[0, 1] = v
            losses.append(float(softmax_cross_entropy(Tensor(logits), [1]).data))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_matches_log_sum_exp_reference(self):
        rng = np.random.default_rng(17)
        logits = rng.normal(scale=5.0, size=(6, 9))
        labels = rng.integers(0, 9, size=6)
        got = float(softmax_cross_entropy(Tensor(logits), labels).data)
        want = 0.0
        for i in range(6):
            row = logits[i]
            want += -(row[labels[i]] - (np.log(np.sum(np.exp(row - row.max()))) + row.max()))
        want /= 6
        assert abs(got - want) <= 1e-6 * abs(want)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_stable_for_huge_logits(self):
        logits = np.array([[1e30, 0.0], [0.0, 1e30]])
        loss = softmax_cross_entropy(Tensor(logits), [0, 1])
        assert float(loss.data) == 0.0

    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_loss_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 7))
        logits = rng.normal(scale=3.0, size=(n, k))
        labels = rng.integers(0, k, size=n)
        assert float(softmax_cross_entropy(Tensor(logits), labels).data) >= 0.0


class TestGlobalAvgPool:
    def test_matches_mean(self):
        x = np.random.default_rng(4).normal(size=(2, 3, 4, 5))
        np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, x.mean(axis=(2, 3)), rtol=1e-12)


class TestSgdStep:
    def test_zero_gradient_is_a_noop(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        before = p.data.copy()
        sgd_step([p], [np.zeros(2)], learning_rate=0.5, momentum=0.9,
                 velocity=[np.zeros(2)])
        np.testing.assert_array_equal(p.data, before)

    def test_identity_gradient_zeroes_params(self):
        p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        sgd_step([p], [p.data.copy()], learning_rate=1.0, momentum=0.0,
                 velocity=[np.zeros(2)])
        np.testing.assert_array_equal(p.data, [0.0, 0.0])

    def test_two_steps_match_hand_unrolled_recurrence(self):
        lr, mom = 0.1, 0.9
        w = 1.0
        g1, g2 = 0.5, -0.25
        # by hand: v1 = g1, w1 = w - lr*v1; v2 = mom*v1 + g2, w2 = w1 - lr*v2
        v1 = g1
        w1 = w - lr * v1
        v2 = mom * v1 + g2
        w2 = w1 - lr * v2
        p = Tensor(np.array([w]), requires_grad=True)
        vel = [np.zeros(1)]
        sgd_step([p], [np.array([g1])], lr, mom, vel)
        sgd_step([p], [np.array([g2])], lr, mom, vel)
        np.testing.assert_allclose(p.data, [w2], rtol=1e-15)
        np.testing.assert_allclose(vel[0], [v2], rtol=1e-15)

    def test_zero_learning_rate_rejected(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ValueError):
            sgd_step([p], [np.array([1.0])], 0.0, 0.9, [np.zeros(1)])

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with pytest.raises(ShapeError):
            sgd_step([p], [np.zeros(3)], 0.1, 0.9, [np.zeros(2)])
