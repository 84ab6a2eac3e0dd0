"""scikit-learn style wrapper: one ``partial_fit`` call per task."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DataCoverageError
from .model import ModelConfig
from .scenario import TaskSpec
from .trainer import Learner, TrainerConfig


class IconClassifier(ClassifierMixin, BaseEstimator):
    """Continual classifier over a frozen random backbone with trainable adapters.

    Each ``partial_fit(X, y, domain=d)`` call is one task: the classes present
    in ``y`` observed in domain ``d``. ``fit`` restarts from scratch and feeds
    the samples task by task, grouped by ``task_ids`` in order of first
    appearance.

    Parameters mirror :class:`ModelConfig` and :class:`TrainerConfig`;
    ``k_clusters=None`` uses 2 clusters, the short-stream default.
    """

    def __init__(self, hidden_dim=16, backbone_layers=3, adapter_layers=None, adapter_rank=5,
                 epochs_total=5, warmup_epochs=3, lr=0.0028125, batch_size=24, alpha=1.0,
                 beta=0.05, gamma=2.0, k_clusters=None, ema_decay=0.9999, shifts_per_task=1,
                 cast_enabled=True, ic_enabled=True, dynamic_threshold_enabled=True,
                 random_state=0):
        self.hidden_dim = hidden_dim
        self.backbone_layers = backbone_layers
        self.adapter_layers = adapter_layers
        self.adapter_rank = adapter_rank
        self.epochs_total = epochs_total
        self.warmup_epochs = warmup_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.k_clusters = k_clusters
        self.ema_decay = ema_decay
        self.shifts_per_task = shifts_per_task
        self.cast_enabled = cast_enabled
        self.ic_enabled = ic_enabled
        self.dynamic_threshold_enabled = dynamic_threshold_enabled
        self.random_state = random_state

    def _init_learner(self, n_features: int) -> None:
        seed = int(self.random_state or 0)
        model = ModelConfig(input_dim=n_features, hidden_dim=self.hidden_dim,
                            backbone_layers=self.backbone_layers,
                            adapter_layers=self.adapter_layers, adapter_rank=self.adapter_rank,
                            ema_decay=self.ema_decay, seed=seed)
        trainer = TrainerConfig(
            epochs_total=self.epochs_total, warmup_epochs=self.warmup_epochs, lr=self.lr,
            batch_size=self.batch_size, alpha=self.alpha, beta=self.beta, gamma=self.gamma,
            k_clusters=self.k_clusters, ema_decay=self.ema_decay,
            shifts_per_task=self.shifts_per_task, cast_enabled=self.cast_enabled,
            ic_enabled=self.ic_enabled, dynamic_threshold_enabled=self.dynamic_threshold_enabled)
        k = trainer.resolved_k(1)
        self.learner_ = Learner(model, trainer, k, seed)
        self.n_features_in_ = n_features
        self.task_results_ = []

    def partial_fit(self, X, y, domain: int = 0):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 2 or len(X) != len(y):
            raise ValueError("X must be 2-d with one label per row")
        if len(X) == 0:
            raise DataCoverageError("empty task")
        if not hasattr(self, "learner_"):
            self._init_learner(X.shape[1])
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        y = y.astype(np.int64)
        task = TaskSpec(len(self.task_results_), int(domain), tuple(int(c) for c in np.unique(y)))
        self.task_results_.append(self.learner_.train_task(task, X, y))
        self.classes_ = np.asarray(self.learner_.clf.seen_classes)
        return self

    def fit(self, X, y, task_ids=None, domains=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        for attr in ("learner_", "classes_", "task_results_", "n_features_in_"):
            self.__dict__.pop(attr, None)
        task_ids = np.zeros(len(y), dtype=np.int64) if task_ids is None else np.asarray(task_ids)
        domains = np.zeros(len(y), dtype=np.int64) if domains is None else np.asarray(domains)
        _, first = np.unique(task_ids, return_index=True)
        for t in task_ids[np.sort(first)]:
            mask = task_ids == t
            doms = np.unique(domains[mask])
            if len(doms) != 1:
                raise ValueError(f"task {t!r} spans several domains {doms.tolist()}")
            self.partial_fit(X[mask], y[mask], domain=int(doms[0]))
        return self

    def predict(self, X):
        check_is_fitted(self, "learner_")
        return self.learner_.predict(np.asarray(X, dtype=np.float64))

    @property
    def n_nodes_(self) -> int:
        check_is_fitted(self, "learner_")
        return self.learner_.clf.num_nodes
