"""scikit-learn estimator facade over the modular training pipeline.

``ModularClassifier`` is a drop-in classifier (fit/predict/score,
get_params/set_params, clone-compatible) so the algorithm composes with
pipelines and model selection. Post-fit it exposes ``decompose`` to pull
per-class weight modules out of the trained network.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .decompose import ModuleSpec, decompose_all
from .losses import LossWeights
from .nn import build_model, cnn_spec, mlp_spec
from .training import TrainConfig, train


class ModularClassifier(ClassifierMixin, BaseEstimator):
    """ReLU network classifier trained with the modular objectives.

    Parameters mirror the training defaults: losses weighted by
    ``alpha`` (affinity), ``beta`` (dispersion), ``gamma`` (compactness),
    decomposition threshold ``tau``, SGD with Nesterov momentum.

    With 2-d X a multilayer perceptron over ``hidden_layer_sizes`` is
    built; with 4-d X (n, channels, height, width) a conv3x3+maxpool
    stack from ``conv_channels`` feeds the dense layers.
    """

    def __init__(self, hidden_layer_sizes=(32, 32), conv_channels=(),
                 alpha=1.0, beta=1.0, gamma=0.3, tau=0.9, epochs=30,
                 batch_size=32, learning_rate=0.05, momentum=0.9,
                 shuffle=True, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.conv_channels = conv_channels
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.shuffle = shuffle
        self.random_state = random_state

    def _validate_input(self, X, y=None, reset=False):
        if y is None:
            X = check_array(X, dtype=np.float64, allow_nd=True)
        else:
            X, y = check_X_y(X, y, dtype=np.float64, allow_nd=True)
        if X.ndim not in (2, 4):
            raise ValueError(f"X must be 2-d or 4-d, got {X.ndim}-d")
        if reset:
            self.n_features_in_ = X.shape[1] if X.ndim == 2 else int(np.prod(X.shape[1:]))
            self._input_shape = X.shape[1:]
        elif X.shape[1:] != self._input_shape:
            raise ValueError(
                f"X has shape {X.shape[1:]} per sample, expected {self._input_shape}")
        return X, y

    def _build_spec(self, n_classes):
        seed = int(self.random_state or 0)
        if len(self._input_shape) == 1:
            return mlp_spec(self._input_shape[0], self.hidden_layer_sizes,
                            n_classes, seed=seed)
        if not self.conv_channels:
            raise ValueError("4-d input requires non-empty conv_channels")
        return cnn_spec(self._input_shape, self.conv_channels,
                        self.hidden_layer_sizes, n_classes, seed=seed)

    def fit(self, X, y):
        X, y = self._validate_input(X, y, reset=True)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least 2 classes")
        dataset = Dataset(X, y_idx, self.classes_.size, name="fit")
        cfg = TrainConfig(
            epochs=int(self.epochs), batch_size=int(self.batch_size),
            learning_rate=float(self.learning_rate), momentum=float(self.momentum),
            weights=LossWeights(alpha=float(self.alpha), beta=float(self.beta),
                                gamma=float(self.gamma)),
            seed=int(self.random_state or 0), shuffle=bool(self.shuffle))
        model = build_model(self._build_spec(self.classes_.size))
        self.model_, self.train_log_ = train(model, dataset, cfg)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X, _ = self._validate_input(X)
        logits, _ = self.model_.forward(X)
        return logits.data

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def decompose(self, X, y, tau: float | None = None) -> list[ModuleSpec]:
        """Per-class modules from activation frequencies on (X, y)."""
        check_is_fitted(self, "model_")
        X, y = self._validate_input(X, y)
        y_idx = np.searchsorted(self.classes_, y)
        if not np.isin(y, self.classes_).all():
            raise ValueError("decompose data contains labels unseen during fit")
        dataset = Dataset(X, y_idx, self.classes_.size, name="decompose")
        return decompose_all(self.model_, dataset,
                             self.tau if tau is None else tau)
