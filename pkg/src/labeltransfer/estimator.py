"""Scikit-learn style estimator wrapping the full training pipeline.

`PartialMultiLabelClassifier` takes region arrays X of shape (N, R, D) and a
ternary label matrix y of shape (N, C) with entries in {-1, 0, +1}, trains
the composite pipeline, and predicts per-category probabilities. Constructor
arguments mirror `TrainConfig` fields so `get_params`/`set_params` and
cloning work the standard way.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import Dataset, Sample
from .metrics import evaluate
from .training import TrainConfig, predict, train


def validate_regions(X):
    """Coerce X to a float64 (N, R, D) array or raise ValueError."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"X must have shape (n_samples, n_regions, "
                         f"region_dim); got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X must contain at least one sample")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    return X


def validate_ternary_labels(y, n_samples=None):
    """Coerce y to an int64 (N, C) matrix over {-1, 0, +1} or raise."""
    y = np.asarray(y)
    if y.ndim != 2:
        raise ValueError(f"y must have shape (n_samples, n_categories); "
                         f"got {y.shape}")
    if not np.all(np.isin(y, (-1, 0, 1))):
        raise ValueError("y entries must be -1 (negative), 0 (unknown) "
                         "or +1 (positive)")
    if n_samples is not None and y.shape[0] != n_samples:
        raise ValueError(f"X has {n_samples} samples but y has {y.shape[0]}")
    return y.astype(np.int64)


def arrays_to_dataset(X, y):
    samples = [Sample(id=f"s{i:06d}", regions=X[i], labels=y[i])
               for i in range(len(X))]
    return Dataset(samples, y.shape[1], X.shape[2], X.shape[1])


class PartialMultiLabelClassifier(BaseEstimator):
    """Multi-label classifier trained from partially observed ternary labels.

    Parameters mirror `TrainConfig`; see that class for semantics. After
    `fit`, the trained pipeline state is available as `state_` and the
    per-epoch log as `history_`.
    """

    def __init__(self, epochs=20, warmup_epochs=5, batch_size=32,
                 learning_rate=1e-3, lr_decay_every=10, lr_decay_factor=0.1,
                 weight_decay=5e-4, lambda_cooccur=10.0, lambda_ranking=0.05,
                 lambda_threshold=0.1, num_prototypes=10, feature_dim=64,
                 pair_hidden=(512, 1024), dtl_beta=4.0, theta_init=0.5,
                 threshold_lr=0.02, learn_thresholds=True, mode="full",
                 aux_updates_features=True, decision_threshold=0.5, seed=0):
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay_every = lr_decay_every
        self.lr_decay_factor = lr_decay_factor
        self.weight_decay = weight_decay
        self.lambda_cooccur = lambda_cooccur
        self.lambda_ranking = lambda_ranking
        self.lambda_threshold = lambda_threshold
        self.num_prototypes = num_prototypes
        self.feature_dim = feature_dim
        self.pair_hidden = pair_hidden
        self.dtl_beta = dtl_beta
        self.theta_init = theta_init
        self.threshold_lr = threshold_lr
        self.learn_thresholds = learn_thresholds
        self.mode = mode
        self.aux_updates_features = aux_updates_features
        self.decision_threshold = decision_threshold
        self.seed = seed

    def _config(self):
        return TrainConfig(
            epochs=self.epochs, warmup_epochs=self.warmup_epochs,
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            lr_decay_every=self.lr_decay_every,
            lr_decay_factor=self.lr_decay_factor,
            weight_decay=self.weight_decay,
            lambda_cooccur=self.lambda_cooccur,
            lambda_ranking=self.lambda_ranking,
            lambda_threshold=self.lambda_threshold,
            num_prototypes=self.num_prototypes,
            feature_dim=self.feature_dim,
            pair_hidden=tuple(self.pair_hidden),
            dtl_beta=self.dtl_beta, theta_init=self.theta_init,
            threshold_lr=self.threshold_lr,
            learn_thresholds=self.learn_thresholds, mode=self.mode,
            aux_updates_features=self.aux_updates_features, seed=self.seed)

    def fit(self, X, y):
        X = validate_regions(X)
        y = validate_ternary_labels(y, n_samples=X.shape[0])
        dataset = arrays_to_dataset(X, y)
        self.n_categories_ = y.shape[1]
        self.n_regions_ = X.shape[1]
        self.region_dim_ = X.shape[2]
        self.state_, self.history_ = train(dataset, self._config())
        return self

    def _check_fitted(self, X):
        if not hasattr(self, "state_"):
            raise ValueError("estimator is not fitted; call fit first")
        X = validate_regions(X)
        if X.shape[1:] != (self.n_regions_, self.region_dim_):
            raise ValueError(
                f"X has region shape {X.shape[1:]}, expected "
                f"({self.n_regions_}, {self.region_dim_})")
        return X

    def predict_proba(self, X):
        """Per-category probabilities, shape (n_samples, n_categories)."""
        X = self._check_fitted(X)
        return predict(self.state_, X)

    def predict(self, X):
        """Binary 0/1 label matrix at `decision_threshold`."""
        return (self.predict_proba(X) >= self.decision_threshold).astype(np.int64)

    def score(self, X, y):
        """Mean average precision over categories with known labels in y."""
        X = self._check_fitted(X)
        y = validate_ternary_labels(y, n_samples=X.shape[0])
        return evaluate(self.predict_proba(X), y).map_score
