"""scikit-learn wrapper around EM training."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import numerics as nx
from .errors import DimensionError
from .inference import forward, reconstruct
from .model import Architecture, init_params
from .training import UNLABELED, Dataset, TrainConfig, em_train, predict_logits


class DGMClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Semi-supervised classifier trained by generalized EM.

    ``fit`` accepts -1 in ``y`` for unlabeled samples, following the
    scikit-learn semi-supervised convention.  Images may be passed flat
    (n, H*W), as (n, H, W) or as (n, C, H, W); ``image_shape`` resolves flat
    input.  ``architecture`` is "mnist", "micro" or an ``Architecture``.
    ``transform`` returns the top-layer CNN features.
    """

    def __init__(self, architecture="mnist", image_shape=(1, 28, 28), width=0.25, epochs=5,
                 batch_size=64, labeled_batch_size=32, optimizer="adam", learning_rate=1e-3,
                 alpha_ce=1.0, alpha_rc=0.5, alpha_kl=0.5, alpha_mm=0.5, alpha_pn=1.0, maxmin=False,
                 alpha_max=0.5, alpha_min=0.5, resnet=False, densenet=False, noise_sigma=0.1,
                 random_state=0):
        self.architecture = architecture
        self.image_shape = image_shape
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.labeled_batch_size = labeled_batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.alpha_ce = alpha_ce
        self.alpha_rc = alpha_rc
        self.alpha_kl = alpha_kl
        self.alpha_mm = alpha_mm
        self.alpha_pn = alpha_pn
        self.maxmin = maxmin
        self.alpha_max = alpha_max
        self.alpha_min = alpha_min
        self.resnet = resnet
        self.densenet = densenet
        self.noise_sigma = noise_sigma
        self.random_state = random_state

    def _images(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        shape = tuple(self.image_shape)
        if X.ndim == 2:
            if X.shape[1] != int(np.prod(shape)):
                raise DimensionError(f"{X.shape[1]} features do not match image shape {shape}")
            return X.reshape((-1,) + shape)
        if X.ndim == 3:
            X = X[:, None]
        if X.shape[1:] != shape:
            raise DimensionError(f"images {X.shape[1:]} do not match image shape {shape}")
        return X

    def _config(self) -> TrainConfig:
        arch = self.architecture if isinstance(self.architecture, str) else "micro"
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           labeled_batch_size=self.labeled_batch_size, optimizer=self.optimizer,
                           learning_rate=self.learning_rate, alpha_ce=self.alpha_ce, alpha_rc=self.alpha_rc,
                           alpha_kl=self.alpha_kl, alpha_mm=self.alpha_mm, alpha_pn=self.alpha_pn,
                           maxmin=self.maxmin, alpha_max=self.alpha_max, alpha_min=self.alpha_min,
                           arch=arch, width=self.width, resnet=self.resnet, densenet=self.densenet,
                           noise_sigma=self.noise_sigma, seed=self.random_state, eval_every=max(self.epochs, 1),
                           monitor_nonnegativity=False)

    def _architecture(self, cfg: TrainConfig, n_classes: int) -> Architecture:
        if isinstance(self.architecture, Architecture):
            if self.architecture.n_classes != n_classes:
                raise DimensionError("architecture class count differs from the labels")
            arch = self.architecture
        elif self.architecture == "micro":
            arch = replace(cfg.architecture(n_classes), input_shape=tuple(self.image_shape))
        else:
            arch = cfg.architecture(n_classes)
        if arch.input_shape != tuple(self.image_shape):
            raise DimensionError(f"architecture input {arch.input_shape} != image shape {self.image_shape}")
        return arch

    def fit(self, X, y):
        images = self._images(X)
        y = np.asarray(y).reshape(-1)
        if y.shape[0] != images.shape[0]:
            raise ValueError("X and y have different lengths")
        labeled = y != UNLABELED
        if not labeled.any():
            raise ValueError("at least one labeled sample is required")
        self.classes_ = np.unique(y[labeled])
        codes = np.full(y.shape[0], UNLABELED, dtype=np.intp)
        codes[labeled] = np.searchsorted(self.classes_, y[labeled])
        cfg = self._config()
        arch = self._architecture(cfg, len(self.classes_))
        params = init_params(arch, np.random.default_rng(self.random_state), self.noise_sigma)
        self.params_, self.history_ = em_train(params, Dataset(images, codes), cfg)
        self.n_features_in_ = int(np.prod(images.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return predict_logits(self.params_, self._images(X))

    def predict_proba(self, X):
        return nx.softmax_logits(self.decision_function(X), axis=1)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X):
        check_is_fitted(self, "params_")
        images = self._images(X)
        top = nx.value_of(forward(self.params_, images).activations[-1])
        return top.reshape(top.shape[0], -1)

    def reconstruct(self, X):
        """Render h(y*, z*; 0) for every image, in the input's layout."""
        check_is_fitted(self, "params_")
        images = self._images(X)
        return reconstruct(self.params_, images).reshape(np.shape(X))
