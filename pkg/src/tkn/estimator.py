"""scikit-learn compatible classifier around the CNN6/TKN6 family."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import flops
from .data import LabeledImageSet
from .network import build_named
from .training import TrainConfig, deterministic, train


def as_images(X, image_shape=None) -> np.ndarray:
    """Coerce ``(n, h*w)``, ``(n, h, w)`` or ``(n, 1, h, w)`` to ``(n, 1, h, w)`` float32."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 4:
        return X
    if X.ndim == 3:
        return X[:, None]
    if X.ndim == 2:
        if image_shape is None:
            side = math.isqrt(X.shape[1])
            if side * side != X.shape[1]:
                raise ValueError(f"cannot infer a square image from {X.shape[1]} features; "
                                 "pass image_shape")
            image_shape = (side, side)
        return X.reshape(len(X), 1, *image_shape)
    raise ValueError(f"unsupported input shape {X.shape}")


class TKNClassifier(ClassifierMixin, BaseEstimator):
    """Targeted-kernel (or plain) six-layer CNN trained with SGD/Nesterov.

    Parameters mirror :class:`~tkn.training.TrainConfig`; ``model`` is one of
    ``tkn6``, ``tkn6-mini``, ``cnn6`` or ``cnn6-mini``. Inputs are grayscale
    images with values in [0, 1].

    >>> clf = TKNClassifier(epochs=0)
    >>> clf.get_params()["model"]
    'tkn6-mini'
    """

    def __init__(self, model="tkn6-mini", family="cauchy", l2=1e-4, beta=4.0, epochs=10,
                 batch_size=128, lr=0.1, lr_div=10.0, milestones=None, weight_decay=1e-4,
                 momentum=0.9, seed=0, image_shape=None, deterministic=True):
        self.model = model
        self.family = family
        self.l2 = l2
        self.beta = beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_div = lr_div
        self.milestones = milestones
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.seed = seed
        self.image_shape = image_shape
        self.deterministic = deterministic

    def _config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs, lr=self.lr, lr_div=self.lr_div,
            milestones=self.milestones, weight_decay=self.weight_decay, momentum=self.momentum,
            l2_attention=self.l2, beta=self.beta, family=self.family, seed=self.seed,
        )

    def fit(self, X, y, eval_set=None):
        """Train from scratch. With ``eval_set=(X_val, y_val)`` the best epoch is kept."""
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        images = as_images(X, self.image_shape)
        self.n_features_in_ = int(np.prod(images.shape[1:]))
        self.image_shape_ = images.shape[2:]
        self._le = LabelEncoder().fit(y)
        self.classes_ = self._le.classes_
        cfg = self._config()
        spec = build_named(self.model, self.image_shape_, len(self.classes_), cfg.l2_attention,
                           cfg.beta, cfg.family)
        test = None
        if eval_set is not None:
            Xv, yv = check_X_y(*eval_set, allow_nd=True, dtype=np.float32)
            test = LabeledImageSet(as_images(Xv, self.image_shape_), self._le.transform(yv))
        data = LabeledImageSet(images, self._le.transform(y))
        if self.deterministic:
            with deterministic():
                result = train(spec, cfg, data, test)
        else:
            result = train(spec, cfg, data, test)
        self.model_ = result.best
        self.last_model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def _images(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float32)
        images = as_images(X, self.image_shape_)
        if images.shape[2:] != tuple(self.image_shape_):
            raise ValueError(f"expected {self.image_shape_} images, got {images.shape[2:]}")
        return images

    def decision_function(self, X):
        images = self._images(X)
        return self.model_.predict_logits(images)

    def predict_proba(self, X):
        images = self._images(X)
        return self.model_.predict_proba(images)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def flop_report(self) -> flops.FlopReport:
        check_is_fitted(self, "model_")
        return flops.count(self.model_)
