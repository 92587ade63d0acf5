"""Scikit-learn style estimator wrapping the bag classifier.

``X`` is a list of per-bag instance matrices (each ``(N_i, D)`` with a
shared width ``D``), so the estimator composes with sklearn model
selection utilities that index ``X`` like a sequence.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .model import BagFeatures, ModelConfig, forward_bag
from .train import TrainConfig, fit_model


def _validate_bags(X) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise ValueError("X must be a nonempty list of (N_i, D) instance matrices")
    bags = []
    width = None
    for i, item in enumerate(X):
        arr = np.asarray(item, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(f"bag {i} must be a nonempty 2-D matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"bag {i} contains non-finite values")
        if width is None:
            width = arr.shape[1]
        elif arr.shape[1] != width:
            raise ValueError(f"bag {i} has width {arr.shape[1]}, expected {width}")
        bags.append(arr)
    return bags


class BagClassifier(BaseEstimator, ClassifierMixin):
    """Bag-level classifier with fit/predict/predict_proba.

    Parameters mirror the model and optimizer configuration; see
    :class:`geomil.model.ModelConfig` and :class:`geomil.train.TrainConfig`.

    Example:
        >>> clf = BagClassifier(epochs=5, d_model=16, n_state=8, fusion_dim=8)
        >>> clf.fit(train_bags, train_labels).predict(test_bags)
    """

    def __init__(self, d_model=128, n_blocks=2, n_state=64, k_experts=4,
                 top_k=2, fusion_dim=128, curvature=0.1,
                 fusion_mode="weighted_add", max_seq_len=4096,
                 dropout_rate=0.1, drop_path_rate=0.0, epochs=100,
                 base_lr=1e-4, weight_decay=0.01, batch_size=8,
                 aux_weight=0.0, seed=0):
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.n_state = n_state
        self.k_experts = k_experts
        self.top_k = top_k
        self.fusion_dim = fusion_dim
        self.curvature = curvature
        self.fusion_mode = fusion_mode
        self.max_seq_len = max_seq_len
        self.dropout_rate = dropout_rate
        self.drop_path_rate = drop_path_rate
        self.epochs = epochs
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.aux_weight = aux_weight
        self.seed = seed

    def fit(self, X, y):
        bags = _validate_bags(X)
        y = np.asarray(y)
        if y.shape[0] != len(bags):
            raise ValueError(f"X has {len(bags)} bags but y has {y.shape[0]} labels")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ValueError("need at least two classes to fit")
        self.n_features_in_ = bags[0].shape[1]
        model_cfg = ModelConfig(
            d_in=self.n_features_in_, d_model=self.d_model,
            n_blocks=self.n_blocks, n_state=self.n_state,
            k_experts=self.k_experts, top_k=self.top_k,
            fusion_dim=self.fusion_dim, curvature=self.curvature,
            fusion_mode=self.fusion_mode, n_classes=self.classes_.shape[0],
            max_seq_len=self.max_seq_len, seed=self.seed,
            dropout_rate=self.dropout_rate, drop_path_rate=self.drop_path_rate,
        )
        train_cfg = TrainConfig(
            epochs=self.epochs, base_lr=self.base_lr,
            weight_decay=self.weight_decay, batch_size=self.batch_size,
            aux_weight=self.aux_weight,
        )
        wrapped = [BagFeatures(features=b, label=int(l), bag_id=f"bag{i}")
                   for i, (b, l) in enumerate(zip(bags, encoded))]
        self.params_ = fit_model(wrapped, [int(l) for l in encoded],
                                 model_cfg, train_cfg, seed=self.seed)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this BagClassifier instance is not fitted yet")

    def predict_proba(self, X):
        self._check_fitted()
        bags = _validate_bags(X)
        out = np.empty((len(bags), self.classes_.shape[0]))
        for i, feats in enumerate(bags):
            logits, _, _ = forward_bag(self.params_, BagFeatures(features=feats))
            shifted = logits - logits.max()
            e = np.exp(shifted)
            out[i] = e / e.sum()
        return out

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
