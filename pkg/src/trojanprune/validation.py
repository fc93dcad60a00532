"""Input validation helpers shared by the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(X, image_shape=None, dtype=np.float32) -> np.ndarray:
    """Coerce X to a finite [N,C,H,W] float array.

    2-d input is accepted when image_shape=(C,H,W) says how to unflatten it,
    which keeps the estimators usable inside ordinary 2-d pipelines.
    """
    X = np.asarray(X)
    if X.ndim == 2:
        if image_shape is None:
            raise ValueError(
                "2-d input needs image_shape=(C,H,W) to be reshaped into images")
        c, h, w = image_shape
        if X.shape[1] != c * h * w:
            raise ValueError(f"cannot reshape {X.shape[1]} features into {image_shape}")
        X = X.reshape(len(X), c, h, w)
    if X.ndim != 4:
        raise ValueError(f"expected [N,C,H,W] images, got {X.ndim}-d input")
    if len(X) == 0:
        raise ValueError("empty input")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    """Coerce y to integer class indices aligned with the image count."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"y must be 1-d with {n_samples} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.round(y)
        if not np.allclose(y, rounded):
            raise ValueError("labels must be integers")
        y = rounded
    y = y.astype(np.int64)
    if len(y) and y.min() < 0:
        raise ValueError("labels must be non-negative")
    return y
