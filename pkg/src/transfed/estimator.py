"""scikit-learn estimator facade over the window transformer.

WindowTransformerClassifier exposes the classifier through the standard
fit/predict/predict_proba/get_params surface so it drops into pipelines,
grid search and cross-validation. Window geometry (rows, features) is
learned from the training data, sklearn-style.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .data import Dataset
from .fedcore import RoundConfig, train_centralized
from .model import ModelConfig


def check_windows(X, window_rows=None, features=None) -> np.ndarray:
    """Validate a window batch: float64, finite, shape (n, rows, features)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(
            f"expected windows of shape (n_samples, window_rows, features), "
            f"got {X.shape}"
        )
    if X.shape[0] == 0:
        raise ValueError("empty window batch")
    if not np.isfinite(X).all():
        raise ValueError("windows contain NaN or Inf")
    if window_rows is not None and X.shape[1:] != (window_rows, features):
        raise ValueError(
            f"windows of shape {X.shape[1:]} do not match the fitted "
            f"({window_rows}, {features})"
        )
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"y must be one label per window, got shape {y.shape}")
    return y


class WindowTransformerClassifier(BaseEstimator, ClassifierMixin):
    """One-patch transformer classifier for fixed-size sensor windows.

    Parameters mirror the model and training configuration; see ModelConfig
    and RoundConfig. ``epochs`` bounds the training run, ``val_fraction``
    carves a stratified holdout that only feeds the history curves.
    """

    def __init__(self, d_model=20, heads=5, ffn_dim=None, transformer_layers=2,
                 positional_encoding=False, head_pooling=False,
                 learning_rate=0.01, weight_decay=0.001, epochs=100,
                 batch_size=30, val_fraction=0.0, augment=False, jitter=0.01,
                 scale_range=0.1, seed=0):
        self.d_model = d_model
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.transformer_layers = transformer_layers
        self.positional_encoding = positional_encoding
        self.head_pooling = head_pooling
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.augment = augment
        self.jitter = jitter
        self.scale_range = scale_range
        self.seed = seed

    def fit(self, X, y):
        X = check_windows(X)
        y = check_labels(y, len(X))
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.window_rows_, self.features_ = X.shape[1], X.shape[2]
        model_config = ModelConfig(
            window_rows=self.window_rows_,
            features=self.features_,
            d_model=self.d_model,
            heads=self.heads,
            ffn_dim=self.ffn_dim,
            transformer_layers=self.transformer_layers,
            n_classes=len(self.classes_),
            jitter=self.jitter,
            scale_range=self.scale_range,
            positional_encoding=self.positional_encoding,
            head_pooling=self.head_pooling,
            seed=self.seed,
        )
        hyper = RoundConfig(
            rounds=1,
            epochs=self.epochs,
            batch_size=self.batch_size,
            n_clients=1,
            lr=self.learning_rate,
            weight_decay=self.weight_decay,
            val_fraction=0.0,
            augment=self.augment,
            seed=self.seed,
        )
        dataset = Dataset(X, y_enc)
        if self.val_fraction > 0.0:
            from .data import split

            train, val, _ = split(dataset, 1.0 - self.val_fraction,
                                  self.val_fraction, 0.0, seed=self.seed)
        else:
            train, val = dataset, None
        self.model_, self.history_ = train_centralized(
            model_config, train, val, hyper
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this WindowTransformerClassifier instance is not fitted yet"
            )

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_windows(X, self.window_rows_, self.features_)
        return self.model_.forward(X)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def param_count(self) -> int:
        self._check_fitted()
        return self.model_.param_count()
