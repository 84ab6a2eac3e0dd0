"""Per-task training (warmup, then joint phase) and the full experiment loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .cast import ShiftPool, cast_loss, cast_terms, snapshot_milestones, snapshot_task_shifts
from .classifier import (IncrementalClassifier, SelectionPlan, batch_ic_loss,
                         decide_expansions, record_task_accuracies)
from .errors import ConfigError, DataCoverageError
from .metrics import EvalMatrix, average_accuracy, forgetting
from .model import ModelConfig, Network, ema_update
from .numerics import make_rng
from .scenario import TaskSpec, TaskStream, index_cells, task_data

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    epochs_total: int = 5
    warmup_epochs: int = 3
    lr: float = 0.0028125
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 24
    alpha: float = 1.0
    beta: float = 0.05
    gamma: float = 2.0
    k_clusters: int | None = None
    ema_decay: float = 0.9999
    shifts_per_task: int = 1
    cast_enabled: bool = True
    ic_enabled: bool = True
    dynamic_threshold_enabled: bool = True
    const_threshold: float = 0.5

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        checks = [
            (self.epochs_total >= 1, "epochs_total", "must be >= 1"),
            (0 <= self.warmup_epochs < self.epochs_total, "warmup_epochs",
             "must be >= 0 and < epochs_total"),
            (self.lr > 0, "lr", "must be positive"),
            (len(self.adam_betas) == 2 and all(0 <= b < 1 for b in self.adam_betas),
             "adam_betas", "must be two values in [0, 1)"),
            (self.adam_eps > 0, "adam_eps", "must be positive"),
            (self.batch_size >= 1, "batch_size", "must be >= 1"),
            (self.alpha >= 0, "alpha", "must be >= 0"),
            (self.beta >= 0, "beta", "must be >= 0"),
            (self.gamma > 0, "gamma", "must be positive"),
            (self.k_clusters is None or self.k_clusters >= 0, "k_clusters", "must be >= 0"),
            (0 <= self.ema_decay <= 1, "ema_decay", "must lie in [0, 1]"),
            (self.shifts_per_task >= 1, "shifts_per_task", "must be >= 1"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise ConfigError(msg, path=f"trainer.{name}")

    def resolved_k(self, num_tasks: int) -> int:
        if self.k_clusters is not None:
            return self.k_clusters
        return 2 if num_tasks <= 20 else 3


class Adam:
    def __init__(self, size: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class CastTerms:
    """The other-cluster shifts and their (frozen) weights for one step."""

    others: np.ndarray
    weights: np.ndarray


def total_loss(net: Network, X, y, plan: SelectionPlan, a_prev, teacher_logits=None,
               cast: CastTerms | None = None, alpha: float = 1.0, beta: float = 0.0,
               distill_selected: bool = False, forward_out=None):
    """Joint-phase objective ``beta * cast + ic`` with plan and cast weights held fixed.

    Returns ``(loss, grad_adapters, grad_head, parts)``.
    """
    logits, cache = forward_out if forward_out is not None else net.forward(X)
    ic, g_logits, parts = batch_ic_loss(logits, plan, y, teacher_logits, alpha, distill_selected)
    g_adapt, g_head = net.backward(cache, g_logits)
    cast_value = 0.0
    if cast is not None and beta != 0.0 and len(cast.others):
        v_cur = net.adapters.flat() - a_prev
        cast_value, g_cast, _ = cast_terms(v_cur, cast.others, cast.weights)
        g_adapt = g_adapt + beta * g_cast
    parts["cast"] = float(cast_value)
    return ic + beta * cast_value, g_adapt, g_head, parts


@dataclass
class TaskResult:
    task_index: int
    domain_id: int
    class_ids: tuple[int, ...]
    train_accs: dict = field(default_factory=dict)
    warmup_accs: dict = field(default_factory=dict)
    expansions: list = field(default_factory=list)
    shift_norm: float = 0.0
    joint_steps: int = 0
    warmup_losses: list = field(default_factory=list)
    joint_losses: list = field(default_factory=list)
    cast_losses: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["train_accs"] = {str(k): v for k, v in self.train_accs.items()}
        out["warmup_accs"] = {str(k): v for k, v in self.warmup_accs.items()}
        out["class_ids"] = list(self.class_ids)
        return out


class Learner:
    """Mutable state of one continual-learning run: model, node groups, shift pool, teacher."""

    def __init__(self, model_config: ModelConfig, config: TrainerConfig, k_clusters: int,
                 seed: int = 0):
        if config.ema_decay != model_config.ema_decay:
            raise ConfigError(f"{config.ema_decay} differs from model.ema_decay="
                              f"{model_config.ema_decay}", path="trainer.ema_decay")
        self.config = config
        self.seed = seed
        self.net = Network(model_config)
        self.clf = IncrementalClassifier()
        self.pool = ShiftPool(k_configured=k_clusters, shifts_per_task=config.shifts_per_task)
        self.teacher: Network | None = None
        self.tasks_seen = 0
        self.batch_rng = make_rng(seed, 400)

    def _batches(self, n):
        order = self.batch_rng.permutation(n)
        bs = self.config.batch_size
        return [order[i:i + bs] for i in range(0, n, bs)]

    def predict(self, X) -> np.ndarray:
        online = self.net.logits(X)
        ema = self.net.logits(X, use_ema=True)
        return self.clf.predict(online, ema)

    def train_accuracy(self, X, y, classes) -> dict:
        return self.clf.per_class_accuracy(self.net.logits(X), y, classes)

    def train_task(self, task: TaskSpec, X, y) -> TaskResult:
        cfg = self.config
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if len(X) == 0:
            raise DataCoverageError(f"task {task.task_index} has no training samples")
        if not set(np.unique(y)) <= set(task.class_ids):
            raise DataCoverageError(f"task {task.task_index} has labels outside {task.class_ids}")
        classes = task.class_ids
        result = TaskResult(task.task_index, task.domain_id, classes)
        clf, net = self.clf, self.net

        clf.begin_task()
        known_before = set(clf.groups)
        clf.register_new_classes(net.head, task)

        # warmup: head only, cross-entropy over the existing nodes
        head_opt = Adam(net.head.size, cfg.lr, cfg.adam_betas, cfg.adam_eps)
        for _ in range(cfg.warmup_epochs):
            for idx in self._batches(len(X)):
                logits, cache = net.forward(X[idx])
                plan = clf.select(logits, classes)
                loss, g_logits, _ = batch_ic_loss(logits, plan, y[idx], None, 0.0)
                _, g_head = net.backward(cache, g_logits)
                net.head.set_flat(head_opt.step(net.head.flat(), g_head))
                result.warmup_losses.append(loss)

        result.warmup_accs = self.train_accuracy(X, y, classes)
        if cfg.ic_enabled:
            decisions = decide_expansions(clf.history, task, result.warmup_accs, cfg.gamma,
                                          cfg.dynamic_threshold_enabled, cfg.const_threshold,
                                          known_classes=known_before)
            clf.apply_expansions(net.head, task, decisions)
            result.expansions = sorted(clf.expanded_now)

        # joint phase: adapters + head
        a_prev = net.adapters.flat()
        n_adapt = net.adapters.size
        joint_epochs = cfg.epochs_total - cfg.warmup_epochs
        n_batches = -(-len(X) // cfg.batch_size)
        milestones = snapshot_milestones(joint_epochs * n_batches, cfg.shifts_per_task)
        snapshots = [a_prev.copy() for m in milestones if m == 0]
        opt = Adam(n_adapt + net.head.size, cfg.lr, cfg.adam_betas, cfg.adam_eps)
        use_cast = cfg.cast_enabled and cfg.beta > 0
        step = 0
        for _ in range(joint_epochs):
            for idx in self._batches(len(X)):
                xb, yb = X[idx], y[idx]
                out = net.forward(xb)
                plan = clf.select(out[0], classes)
                teacher_logits = self.teacher.logits(xb) if self.teacher is not None else None
                terms = None
                if use_cast:
                    _, _, detail = cast_loss(net.adapters.flat() - a_prev, self.pool)
                    if detail.indices:
                        terms = CastTerms(self.pool.matrix()[detail.indices], detail.weights)
                loss, g_adapt, g_head, parts = total_loss(
                    net, xb, yb, plan, a_prev, teacher_logits, terms, cfg.alpha,
                    cfg.beta if use_cast else 0.0, distill_selected=not cfg.ic_enabled,
                    forward_out=out)
                params = np.concatenate([net.adapters.flat(), net.head.flat()])
                params = opt.step(params, np.concatenate([g_adapt, g_head]))
                net.adapters.set_flat(params[:n_adapt])
                net.head.set_flat(params[n_adapt:])
                ema_update(net.ema, net.adapters)
                step += 1
                result.joint_losses.append(loss)
                result.cast_losses.append(parts["cast"])
                snapshots.extend(net.adapters.flat() for m in milestones if m == step)
        result.joint_steps = step

        result.train_accs = self.train_accuracy(X, y, classes)
        record_task_accuracies(clf.history, task, result.train_accs)
        self.teacher = net.snapshot()
        added = snapshot_task_shifts(self.pool, task.task_index, a_prev, snapshots,
                                     make_rng(self.seed, 300, task.task_index))
        result.shift_norm = added[-1].norm
        self.tasks_seen += 1
        return result


def evaluate(learner: Learner, X, y) -> float:
    if len(X) == 0:
        raise DataCoverageError("empty test split")
    return float(np.mean(learner.predict(X) == np.asarray(y)))


def run_experiment(stream: TaskStream, cells, model_config: ModelConfig,
                   config: TrainerConfig, seed: int = 0):
    """Train on every task in order and fill the accuracy matrix on test splits.

    Returns ``(EvalMatrix, [TaskResult], summary, learner)``.
    """
    index = cells if isinstance(cells, dict) else index_cells(cells)
    train = [task_data(index, t, "train") for t in stream]
    test = [task_data(index, t, "test") for t in stream]
    for t, (xt, _) in zip(stream, test):
        if len(xt) == 0:
            raise DataCoverageError(f"task {t.task_index} has an empty test split")
    learner = Learner(model_config, config, config.resolved_k(len(stream)), seed)
    matrix = EvalMatrix()
    results = []
    for t, task in enumerate(stream):
        results.append(learner.train_task(task, *train[t]))
        matrix.append_row([evaluate(learner, *test[i]) for i in range(t + 1)])
        log.debug("task %d/%d acc=%.4f", t + 1, len(stream), average_accuracy(matrix))
    summary = {
        "num_tasks": len(stream),
        "scenario": stream.kind.value,
        "seed": seed,
        "avg_acc": average_accuracy(matrix),
        "forgetting": forgetting(matrix),
        "total_nodes": learner.clf.num_nodes,
        "num_classes_seen": len(learner.clf.groups),
        "expansions": learner.clf.expansion_count(),
        "pool_size": len(learner.pool),
        "k_clusters": learner.pool.k_configured,
        "k_effective": learner.pool.k_effective,
        "shift_length": learner.net.adapters.size,
        "flags": {"cast": config.cast_enabled, "ic": config.ic_enabled,
                  "dynamic_threshold": config.dynamic_threshold_enabled},
    }
    return matrix, results, summary, learner
