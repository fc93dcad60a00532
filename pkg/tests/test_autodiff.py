"""Reverse-mode gradients checked against central finite differences."""

import numpy as np
import pytest

from fdcheck import (
    away_from_kinks,
    finite_diff_grad,
    finite_diff_grad_at,
    max_rel_err,
    project_to_scalar,
    sampled_coords,
)
from trojanprune.autodiff import (
    ShapeError,
    Tape,
    Tensor,
    backward,
    batchnorm,
    conv2d,
    dense,
    global_avg_pool,
    maxpool2,
    relu,
    softmax_cross_entropy,
    zero_grads,
)
from trojanprune.network import default_spec, forward, init_params

F64_STEP, F64_TOL, F64_FLOOR = 1e-5, 1e-4, 1e-6
# float32 forward/backward arithmetic carries ~1e-4 absolute noise, so
# coordinates whose gradients sit below the floor are held to the matching
# absolute bar (floor * tol) instead of a pure ratio.
F32_STEP, F32_TOL, F32_FLOOR = 1e-3, 1e-2, 1e-2


def _check_op(build, tensors, seed=0):
    """FD-check every requires-grad tensor of one primitive at 64-bit."""
    rng = np.random.default_rng(seed)
    tape = Tape()
    out = build(tape)
    coeffs = rng.normal(size=out.data.shape)
    loss = project_to_scalar(out, coeffs, tape)
    backward(tape, loss)

    def loss_value():
        t2 = Tape()
        return float((build(t2).data * coeffs).sum())

    for name, t in tensors.items():
        numeric = finite_diff_grad(loss_value, t.data, F64_STEP)
        err = max_rel_err(t.grad, numeric, F64_FLOOR)
        assert err <= F64_TOL, f"{name}: rel err {err:.3e}"


class TestBackwardBasics:
    def test_sum_of_parameter_gives_ones(self):
        p = Tensor(np.arange(1.0, 7.0).reshape(2, 3), requires_grad=True)
        tape = Tape()
        loss = project_to_scalar(relu(p, tape=tape), np.ones((2, 3)), tape)
        backward(tape, loss)
        np.testing.assert_array_equal(p.grad, np.ones((2, 3)))

    def test_disconnected_parameter_gets_zero(self):
        p = Tensor(np.ones((2, 2)), requires_grad=True)
        q = Tensor(np.ones((2, 2)), requires_grad=True)
        tape = Tape()
        relu(q, tape=tape)  # q participates but never reaches the loss
        loss = project_to_scalar(relu(p, tape=tape), np.ones((2, 2)), tape)
        backward(tape, loss)
        np.testing.assert_array_equal(q.grad, np.zeros((2, 2)))

    def test_backward_before_forward_rejected(self):
        with pytest.raises(RuntimeError):
            backward(Tape(), Tensor(np.asarray(0.0)))

    def test_backward_needs_scalar_tail(self):
        p = Tensor(np.ones(3), requires_grad=True)
        tape = Tape()
        out = relu(p, tape=tape)
        with pytest.raises(ShapeError):
            backward(tape, out)

    def test_backward_rejects_foreign_loss(self):
        p = Tensor(np.ones(3), requires_grad=True)
        tape = Tape()
        relu(p, tape=tape)
        with pytest.raises(RuntimeError):
            backward(tape, Tensor(np.asarray(0.0)))


class TestPrimitiveGradients:
    def test_conv2d(self):
        rng = np.random.default_rng(10)
        x = Tensor(away_from_kinks(rng, (2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        _check_op(lambda t: conv2d(x, w, b, stride=1, padding=1, tape=t),
                  {"x": x, "w": w, "b": b})

    @pytest.mark.parametrize("stride,padding", [(2, 0), (2, 1), (3, 2)])
    def test_conv2d_strided(self, stride, padding):
        rng = np.random.default_rng(20 + stride)
        x = Tensor(away_from_kinks(rng, (1, 2, 9, 9)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        _check_op(lambda t: conv2d(x, w, stride=stride, padding=padding, tape=t),
                  {"x": x, "w": w})

    def test_batchnorm_train(self):
        rng = np.random.default_rng(30)
        x = Tensor(rng.normal(size=(3, 4, 5, 5)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
        beta = Tensor(rng.normal(size=4), requires_grad=True)

        def build(t):
            # fresh running buffers each call so the train-mode update
            # cannot leak state between finite-difference probes
            return batchnorm(x, gamma, beta, np.zeros(4), np.ones(4),
                             eps=1e-5, mode="train", tape=t)

        _check_op(build, {"x": x, "gamma": gamma, "beta": beta})

    def test_batchnorm_infer(self):
        rng = np.random.default_rng(31)
        x = Tensor(rng.normal(size=(3, 4, 5, 5)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
        beta = Tensor(rng.normal(size=4), requires_grad=True)
        rm = rng.normal(size=4)
        rv = rng.uniform(0.5, 2.0, 4)
        _check_op(lambda t: batchnorm(x, gamma, beta, rm, rv, eps=1e-5, mode="infer", tape=t),
                  {"x": x, "gamma": gamma, "beta": beta})

    def test_relu(self):
        rng = np.random.default_rng(40)
        x = Tensor(away_from_kinks(rng, (4, 7)), requires_grad=True)
        _check_op(lambda t: relu(x, tape=t), {"x": x})

    def test_maxpool2(self):
        rng = np.random.default_rng(50)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        _check_op(lambda t: maxpool2(x, tape=t), {"x": x})

    def test_global_avg_pool(self):
        rng = np.random.default_rng(60)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        _check_op(lambda t: global_avg_pool(x, tape=t), {"x": x})

    def test_dense(self):
        rng = np.random.default_rng(70)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        _check_op(lambda t: dense(x, w, b, tape=t), {"x": x, "w": w, "b": b})

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(80)
        logits = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        labels = rng.integers(0, 6, size=4)
        tape = Tape()
        loss = softmax_cross_entropy(logits, labels, tape=tape)
        backward(tape, loss)

        def loss_value():
            return float(softmax_cross_entropy(Tensor(logits.data), labels).data)

        numeric = finite_diff_grad(loss_value, logits.data, F64_STEP)
        assert max_rel_err(logits.grad, numeric, F64_FLOOR) <= F64_TOL


def _cnn_loss(spec, params, images, labels, dtype):
    tape = Tape()
    logits, _, _ = forward(spec, params, Tensor(images, dtype=dtype), mode="train", tape=tape)
    return softmax_cross_entropy(logits, labels, tape=tape), tape


def _float64_oracle(spec, params, images, labels):
    """Loss evaluator that mirrors the current parameter values into a float64
    twin of the network; the oracle side of every finite-difference probe runs
    at full precision regardless of the engine precision under test."""
    oracle_params = init_params(spec, seed=0, precision="float64")
    oracle_tensors = oracle_params.trainables()

    def loss_value():
        for q64, q in zip(oracle_tensors, params.trainables()):
            q64.data[...] = q.data.astype(np.float64)
        l, _ = _cnn_loss(spec, oracle_params, images, labels, np.float64)
        return float(l.data)

    return loss_value


class TestFullNetworkGradients:
    # The seeds below are pinned to probes that never straddle a ReLU kink or
    # flip a maxpool argmax: a central difference across a kink measures a
    # secant between two linear pieces, not the derivative.
    @pytest.mark.parametrize("precision,step,tol,floor", [
        ("float64", F64_STEP, F64_TOL, F64_FLOOR),
        ("float32", F32_STEP, F32_TOL, F32_FLOOR),
    ])
    def test_small_cnn_every_parameter(self, precision, step, tol, floor):
        """Full-coordinate check of a downsized CNN at both precisions."""
        from trojanprune.network import ConvBlock, NetworkSpec

        spec = NetworkSpec(in_channels=2, image_size=8,
                           blocks=(ConvBlock(4, 3, 1, 1, pool=True),
                                   ConvBlock(6, 3, 1, 1, pool=False)),
                           num_classes=3)
        params = init_params(spec, seed=25, precision=precision)
        rng = np.random.default_rng(321)
        images = away_from_kinks(rng, (2, 2, 8, 8), low=0.1, high=0.9)
        labels = np.array([0, 2])
        dtype = np.float64 if precision == "float64" else np.float32

        loss, tape = _cnn_loss(spec, params, images, labels, dtype)
        backward(tape, loss)
        analytic = {i: p.grad.copy() for i, p in enumerate(params.trainables())}
        zero_grads(params.trainables())
        loss_value = _float64_oracle(spec, params, images, labels)

        for i, p in enumerate(params.trainables()):
            numeric = finite_diff_grad(loss_value, p.data, step)
            err = max_rel_err(analytic[i], numeric, floor)
            assert err <= tol, f"parameter {i} ({precision}): rel err {err:.3e}"

    @pytest.mark.parametrize("precision,tol,floor", [
        ("float64", F64_TOL, F64_FLOOR),
        ("float32", F32_TOL, F32_FLOOR),
    ])
    def test_fixture_network_sampled_coordinates(self, precision, tol, floor):
        """The full-size desk network, probed at seeded coordinates per tensor."""
        spec = default_spec(3, 16, 4)
        params = init_params(spec, seed=9, precision=precision)
        rng = np.random.default_rng(456)
        images = rng.uniform(0.05, 0.95, size=(2, 3, 16, 16))
        labels = np.array([1, 3])
        dtype = np.float64 if precision == "float64" else np.float32

        loss, tape = _cnn_loss(spec, params, images, labels, dtype)
        backward(tape, loss)
        analytic = [p.grad.copy() for p in params.trainables()]
        zero_grads(params.trainables())
        loss_value = _float64_oracle(spec, params, images, labels)

        for i, p in enumerate(params.trainables()):
            coords = sampled_coords(p.data.shape, 24, np.random.default_rng(1000 + i))
            numeric = finite_diff_grad_at(loss_value, p.data, F64_STEP, coords)
            err = max_rel_err(analytic[i].reshape(-1)[coords], numeric, floor)
            assert err <= tol, f"parameter {i} ({precision}): rel err {err:.3e}"


class TestDeterminism:
    def test_same_seed_same_tensors_bitwise(self):
        spec = default_spec(3, 16, 4)
        outs = []
        for _ in range(2):
            params = init_params(spec, seed=77)
            images = np.random.default_rng(88).uniform(size=(4, 3, 16, 16))
            loss, tape = _cnn_loss(spec, params, images, np.array([0, 1, 2, 3]), np.float32)
            backward(tape, loss)
            outs.append((loss.data.copy(), params.conv_layers[0].weight.grad.copy()))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])
