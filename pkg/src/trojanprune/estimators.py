"""Scikit-learn style front door.

ConvNetClassifier wraps the CNN and trainer behind fit/predict, and
BackdoorFilterPruner wraps the score-and-prune defense as a meta-estimator
over an already fitted classifier, so both compose with the usual sklearn
tooling (get_params, clone, scoring).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import predict_logits
from .network import ConvBlock, NetworkSpec, init_params
from .poison import Dataset
from .pruning import PruneConfig, prune
from .scoring import EPS_DEFAULT, score_network
from .training import TrainConfig, train
from .validation import check_images, check_labels


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class ConvNetClassifier(BaseEstimator, ClassifierMixin):
    """Small conv-BN-ReLU image classifier trained with momentum SGD.

    Parameters
    ----------
    channels : tuple of int
        Output channels of each conv block.
    pools : tuple of bool
        Whether each block ends in 2x2 max pooling; must align with channels.
    kernel_size, padding : int
        Shared conv geometry for all blocks (stride is 1).
    epochs, batch_size, learning_rate, momentum : training hyper-parameters.
    seed : int
        Drives both weight init and shuffle order (via distinct streams).
    precision : "float32" or "float64".
    image_shape : optional (C, H, W)
        Lets fit/predict accept flattened 2-d input.
    """

    def __init__(self, channels=(16, 32, 64), pools=(True, True, False),
                 kernel_size=3, padding=1, epochs=30, batch_size=32,
                 learning_rate=0.05, momentum=0.9, seed=0,
                 precision="float32", image_shape=None):
        self.channels = channels
        self.pools = pools
        self.kernel_size = kernel_size
        self.padding = padding
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed
        self.precision = precision
        self.image_shape = image_shape

    def _build_spec(self, X: np.ndarray, n_classes: int) -> NetworkSpec:
        if len(self.channels) != len(self.pools):
            raise ValueError("channels and pools must have the same length")
        blocks = tuple(
            ConvBlock(c, self.kernel_size, 1, self.padding, pool=p)
            for c, p in zip(self.channels, self.pools)
        )
        return NetworkSpec(in_channels=X.shape[1], image_size=X.shape[2],
                           blocks=blocks, num_classes=n_classes)

    def fit(self, X, y):
        X = check_images(X, self.image_shape)
        y = check_labels(y, len(X))
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        encoded = np.searchsorted(self.classes_, y)
        self.spec_ = self._build_spec(X, len(self.classes_))
        params = init_params(self.spec_, self.seed, self.precision)
        dataset = Dataset(X, encoded, len(self.classes_))
        config = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                             learning_rate=self.learning_rate, momentum=self.momentum,
                             seed=self.seed + 1)
        self.params_, self.history_ = train(self.spec_, params, dataset, config)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, self.image_shape)
        return predict_logits(self.spec_, self.params_, X)

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class BackdoorFilterPruner(BaseEstimator, ClassifierMixin):
    """Defense wrapper: score a fitted classifier's filters on a small clean
    set, zero the outliers' batch-norm channels, and predict with the result.

    Parameters
    ----------
    estimator : fitted ConvNetClassifier (or any object exposing spec_/params_/classes_).
    mu : float
        Outlier multiplier for the per-layer mean + mu * std threshold.
    variant : str
        Which scoring formula ranks the filters (see scoring.VARIANTS).
    eps : float
        Floor protecting the score's divisors.
    """

    def __init__(self, estimator, mu=3.5, variant="full", eps=EPS_DEFAULT):
        self.estimator = estimator
        self.mu = mu
        self.variant = variant
        self.eps = eps

    def fit(self, X, y):
        check_is_fitted(self.estimator, "params_")
        X = check_images(X, getattr(self.estimator, "image_shape", None))
        y = check_labels(y, len(X))
        self.classes_ = self.estimator.classes_
        encoded = np.searchsorted(self.classes_, y)
        defense = Dataset(X, encoded, len(self.classes_))
        spec, params = self.estimator.spec_, self.estimator.params_
        self.score_table_ = score_network(spec, params, defense,
                                          variant=self.variant, eps=self.eps)
        self.params_, self.prune_report_ = prune(
            spec, params, self.score_table_, PruneConfig(mu=self.mu, eps=self.eps))
        self.spec_ = spec
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, getattr(self.estimator, "image_shape", None))
        return predict_logits(self.spec_, self.params_, X)

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
