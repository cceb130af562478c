"""scikit-learn style wrappers around the model, the signature and a full run.

``MLPClassifier``        the one-hidden-layer network trained with plain SGD
``SignatureTransformer`` per-sample activation-sparsity signatures of a fitted network
``DagAFLClassifier``     partitions the training data across simulated clients,
                         runs DAG-AFL and predicts with the average of the final
                         client models
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import RunConfig
from .fl_core import Dataset, ModelDims, init_params, local_train, predict
from .signature import DEFAULT_GROUPS, sample_signatures
from .simulation import bootstrap, run
from .tip_selection import aggregate


def _encode(y):
    classes, codes = np.unique(y, return_inverse=True)
    return classes, codes.astype(np.int64)


class MLPClassifier(ClassifierMixin, BaseEstimator):
    """ReLU MLP with one hidden layer, softmax output and mini-batch SGD."""

    def __init__(self, hidden=64, epochs=20, lr=0.05, batch_size=32, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_, codes = _encode(y)
        self.n_features_in_ = X.shape[1]
        self.dims_ = ModelDims(X.shape[1], self.hidden, len(self.classes_))
        w0 = init_params(self.dims_, np.random.default_rng([self.random_state, 0]))
        self.coef_ = local_train(w0, self.dims_, X, codes, self.epochs, self.lr,
                                 [self.random_state, 1], self.batch_size)
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        return self.classes_[predict(self.coef_, self.dims_, X)]


class SignatureTransformer(TransformerMixin, BaseEstimator):
    """Map samples to their grouped hidden-layer sparsity (one column per group).

    ``estimator`` must be a fitted ``MLPClassifier`` (or anything exposing
    ``coef_`` and ``dims_``).
    """

    def __init__(self, estimator=None, n_groups=DEFAULT_GROUPS):
        self.estimator = estimator
        self.n_groups = n_groups

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        est = self.estimator
        if est is None:
            if y is None:
                raise ValueError("without an estimator, fit needs labels to train one")
            est = MLPClassifier().fit(X, y)
        check_is_fitted(est, "coef_")
        self.estimator_ = est
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "estimator_")
        X = check_array(X, dtype=float)
        est = self.estimator_
        return sample_signatures(est.coef_, est.dims_, X, self.n_groups)


class DagAFLClassifier(ClassifierMixin, BaseEstimator):
    """Fit by simulating DAG-AFL over ``clients`` partitions of the training set."""

    def __init__(self, clients=10, partition="iid", tips=2, lam=0.5, alpha=0.1,
                 max_global_iters=20, patience=5, local_epochs=5, lr=0.05,
                 hidden=64, random_state=0):
        self.clients = clients
        self.partition = partition
        self.tips = tips
        self.lam = lam
        self.alpha = alpha
        self.max_global_iters = max_global_iters
        self.patience = patience
        self.local_epochs = local_epochs
        self.lr = lr
        self.hidden = hidden
        self.random_state = random_state

    def _config(self) -> RunConfig:
        return RunConfig(clients=self.clients, partition=self.partition, tips=self.tips,
                         lam=self.lam, alpha=self.alpha, max_global_iters=self.max_global_iters,
                         patience=self.patience, local_epochs=self.local_epochs, lr=self.lr,
                         hidden=self.hidden, seed=self.random_state, min_client_samples=3)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_, codes = _encode(y)
        self.n_features_in_ = X.shape[1]
        cfg = self._config()
        result = run(cfg, bootstrap(cfg, Dataset(X, codes, len(self.classes_))))
        self.dims_ = result.env.dims
        self.coef_ = aggregate([c.model for c in result.env.clients])
        self.metrics_ = result.metrics
        self.ledger_ = result.ledger
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        return self.classes_[predict(self.coef_, self.dims_, X)]
