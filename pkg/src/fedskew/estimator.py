"""scikit-learn style front end: simulate federated training with ``fit``."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from fedskew.aggregators import LocalConfig
from fedskew.datasets import Dataset
from fedskew.federation import ExperimentConfig, run_experiment
from fedskew.nn import predict


class FederatedClassifier(ClassifierMixin, BaseEstimator):
    """MLP trained by simulated federated learning over a skewed partition of ``X``.

    ``fit`` partitions the training rows across ``n_devices`` devices (``k``
    labels each, ``s`` train samples each, quantity variance ``var``), runs
    ``rounds`` communication rounds with the chosen aggregator and keeps the
    final global model. Per-round macro F1 on the devices' test shards is
    exposed as ``curve_``.

    Under FedPer the global head is never trained (each device keeps its own),
    so ``predict`` on unseen data is only meaningful for the other aggregators.
    """

    def __init__(self, aggregator="FedAvg", n_devices=30, active_count=6, rounds=100, k=None, s=300,
                 var=0.0, hidden=(200,), dropout=0.0, epochs=1, batch_size=10, lr=0.01, mu=0.001,
                 global_lr=1.0, selection="uniform", workers=1, random_state=0):
        self.aggregator = aggregator
        self.n_devices = n_devices
        self.active_count = active_count
        self.rounds = rounds
        self.k = k
        self.s = s
        self.var = var
        self.hidden = hidden
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.mu = mu
        self.global_lr = global_lr
        self.selection = selection
        self.workers = workers
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        encoded = np.searchsorted(self.classes_, y)
        n_classes = len(self.classes_)
        self.n_features_in_ = X.shape[1]
        cfg = ExperimentConfig(
            dataset="array", aggregator=self.aggregator, n_devices=self.n_devices,
            active_count=self.active_count, rounds=self.rounds,
            k=n_classes if self.k is None else self.k, s=self.s, var=self.var,
            local=LocalConfig(self.epochs, self.batch_size, self.lr, self.mu, global_lr=self.global_lr),
            hidden=tuple(self.hidden), dropout=self.dropout, seed=int(self.random_state or 0),
            selection=self.selection,
        )
        result = run_experiment(cfg, Dataset(X, encoded, n_classes, "array"), workers=self.workers)
        self.result_ = result
        self.params_ = result.state.global_params
        self.curve_ = np.array(result.f1_curve)
        self.emd_ = result.emd
        self.iid_level_ = result.iid_level
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.classes_[predict(self.params_, X)]
