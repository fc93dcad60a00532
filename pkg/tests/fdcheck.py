"""Finite-difference and scalarization helpers shared by the gradient tests."""

import numpy as np

from trojanprune.autodiff import Tensor


def project_to_scalar(out, coeffs, tape):
    """Append a fixed linear projection to the tape so any output becomes a
    scalar loss; keeps per-primitive gradient checks independent of the other
    primitives."""
    c = np.asarray(coeffs, dtype=out.data.dtype)
    scalar = Tensor(np.asarray((out.data * c).sum(), dtype=out.data.dtype))
    scalar.requires_grad = out.requires_grad

    def backward_fn(g):
        return (float(g) * c,)

    tape.record("test_projection", (out,), scalar, backward_fn)
    return scalar


def finite_diff_grad(loss_fn, arr, h):
    """Central-difference gradient of loss_fn() w.r.t. every element of arr,
    mutating arr in place and restoring it."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_err(analytic, numeric, floor):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / scale).max())


def sampled_coords(shape, count, rng):
    """Deterministic sample of flat coordinates for large tensors."""
    size = int(np.prod(shape))
    if size <= count:
        return np.arange(size)
    return rng.choice(size, size=count, replace=False)


def finite_diff_grad_at(loss_fn, arr, h, coords):
    flat = arr.reshape(-1)
    out = np.zeros(len(coords), dtype=np.float64)
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        out[k] = (up - down) / (2.0 * h)
    return out


def away_from_kinks(rng, shape, low=0.2, high=1.2):
    """Random values bounded away from zero so ReLU kinks and pooling ties
    cannot corrupt a finite-difference probe."""
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return mag * sign
