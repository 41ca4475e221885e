"""scikit-learn style wrapper around network construction and training."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import SkeletonDataset
from .graph import build_topology
from .model import NetworkConfig, build_stigcn, preset_config
from .training import TrainConfig, extract_features, predict_logits, train

__all__ = ["STIGCNClassifier", "check_skeleton_array"]


def check_skeleton_array(X, channels=None, joints=None) -> np.ndarray:
    """Validate a skeleton batch and return it as ``(N, C, T, V, M)`` float array.

    Rank-4 input ``(N, C, T, V)`` is read as a single body.
    """
    X = check_array(X, allow_nd=True, dtype=[np.float64, np.float32], ensure_2d=False,
                    ensure_all_finite=True)
    if X.ndim == 4:
        X = X[..., None]
    if X.ndim != 5:
        raise ValueError(f"expected (N, C, T, V[, M]) skeleton array, got shape {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"expected {channels} coordinate channels, got {X.shape[1]}")
    if joints is not None and X.shape[3] != joints:
        raise ValueError(f"expected {joints} joints, got {X.shape[3]}")
    return X


class STIGCNClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Skeleton action classifier.

    ``network`` is a preset name or a ``NetworkConfig``; frames, bodies and
    class count are taken from the training data. ``transform`` returns the
    pooled backbone features.
    """

    def __init__(self, network="curriculum", topology=None, lr=0.05, decay_epochs=(),
                 momentum=0.9, weight_decay=1e-4, batch_size=16, epochs=10, seed=0,
                 precision="f32"):
        self.network = network
        self.topology = topology
        self.lr = lr
        self.decay_epochs = decay_epochs
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.precision = precision

    def _network_config(self, X, n_classes) -> NetworkConfig:
        cfg = self.network if isinstance(self.network, NetworkConfig) else preset_config(self.network)
        if self.topology is not None:
            cfg = replace(cfg, topology=build_topology(self.topology)
                          if isinstance(self.topology, str) else self.topology)
        return replace(cfg, frames=X.shape[2], bodies=X.shape[4], class_count=n_classes,
                       input_channels=X.shape[1])

    def fit(self, X, y):
        X = check_skeleton_array(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} samples but {len(y)} labels")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        cfg = self._network_config(X, len(self.classes_))
        if X.shape[3] != cfg.topology.joint_count:
            raise ValueError(f"data has {X.shape[3]} joints, topology {cfg.topology.name!r} "
                             f"has {cfg.topology.joint_count}")
        tcfg = TrainConfig(lr=self.lr, decay_epochs=tuple(self.decay_epochs), momentum=self.momentum,
                           weight_decay=self.weight_decay, batch_size=self.batch_size,
                           epochs=self.epochs, seed=self.seed, precision=self.precision)
        self.model_ = build_stigcn(cfg, seed=self.seed, dtype=tcfg.dtype)
        ds = SkeletonDataset(X, encoded, len(self.classes_), topology=cfg.topology.name)
        _, self.history_ = train(self.model_, ds, tcfg)
        self.n_features_out_ = self.model_.fc.c_in
        return self

    def _checked(self, X):
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        return check_skeleton_array(X, cfg.input_channels, cfg.topology.joint_count)

    def decision_function(self, X):
        X = self._checked(X)
        return predict_logits(self.model_, X, batch_size=64)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        z = self.decision_function(X)
        # ties resolve to the lowest class index
        return self.classes_[np.argmax(z, axis=1)]

    def transform(self, X):
        X = self._checked(X)
        return extract_features(self.model_, X)
