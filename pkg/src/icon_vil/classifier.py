"""Incremental classifier: per-class node groups over a growing head.

Each class owns one or more head rows ("nodes"). When a class comes back in a
domain its existing nodes serve poorly, judged by a tanh threshold on the
relative accuracy drop, the class gets a fresh node for that task. Training
uses one node per class (the fresh one if expanded, otherwise the max-logit
node) and distils the previous model into every other pre-existing node.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadLabel, EmptyInput, MissingGroup, ZeroHistoryMean
from .numerics import kl_divergence, softmax_cross_entropy
from .scenario import TaskSpec


def compute_threshold(prev_accs, acc_new: float, gamma: float = 2.0) -> tuple[float, float]:
    """Relative accuracy drop ``p`` scaled by ``gamma``, and the threshold ``tanh(p)``."""
    prev = [float(a) for a in prev_accs]
    if not prev:
        raise EmptyInput("no previous-domain accuracies")
    mean_prev = sum(prev) / len(prev)
    if mean_prev <= 0:
        raise ZeroHistoryMean("previous-domain accuracies average to zero")
    p = gamma * (mean_prev - float(acc_new)) / mean_prev
    return p, math.tanh(p)


@dataclass(frozen=True)
class Node:
    node_id: int
    created_task: int
    created_domain: int


@dataclass
class NodeGroup:
    class_id: int
    nodes: list[Node] = field(default_factory=list)

    @property
    def node_ids(self) -> list[int]:
        return [n.node_id for n in self.nodes]


class AccuracyHistory(dict):
    """``(class_id, domain_id) -> accuracy``; the latest visit overwrites."""

    def record(self, class_id: int, domain_id: int, acc: float) -> None:
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        self[(int(class_id), int(domain_id))] = float(acc)

    def other_domains(self, class_id: int, domain_id: int) -> list[float]:
        return [acc for (c, d), acc in sorted(self.items()) if c == class_id and d != domain_id]


@dataclass
class ExpansionDecision:
    class_id: int
    expand: bool
    reason: str
    warmup_acc: float | None = None
    p: float | None = None
    delta: float | None = None


def record_task_accuracies(history: AccuracyHistory, task: TaskSpec, accs: dict) -> None:
    for c in task.class_ids:
        if c in accs:
            history.record(c, task.domain_id, accs[c])


def decide_expansions(history: AccuracyHistory, task: TaskSpec, warmup_accs: dict,
                      gamma: float = 2.0, dynamic_threshold: bool = True,
                      const_threshold: float = 0.5,
                      known_classes=None) -> dict[int, ExpansionDecision]:
    """Per current-task class: whether to append a node for this task.

    Classes outside ``known_classes`` are brand new and always get their
    single first node. Known classes expand when their post-warmup accuracy
    falls below the threshold; they need history in some *other* domain.
    """
    known = set(known_classes) if known_classes is not None else {c for c, _ in history}
    out = {}
    for c in task.class_ids:
        if c not in known:
            out[c] = ExpansionDecision(c, True, "new")
            continue
        acc = warmup_accs.get(c)
        prev = history.other_domains(c, task.domain_id)
        if acc is None or not prev:
            out[c] = ExpansionDecision(c, False, "no-history", acc)
            continue
        if dynamic_threshold:
            try:
                p, delta = compute_threshold(prev, acc, gamma)
            except ZeroHistoryMean:
                out[c] = ExpansionDecision(c, False, "zero-history", acc)
                continue
        else:
            p, delta = None, const_threshold
        expand = acc < delta
        out[c] = ExpansionDecision(c, expand, "below-threshold" if expand else "kept", acc, p, delta)
    return out


@dataclass
class SelectionPlan:
    """Chosen node per (sample, current-task class) and the frozen nodes per class."""

    classes: tuple[int, ...]
    chosen: np.ndarray                      # (batch, n_classes) node ids
    frozen: dict[int, frozenset] = field(default_factory=dict)
    expanded: dict[int, bool] = field(default_factory=dict)


class IncrementalClassifier:
    """Node-group bookkeeping for one head; the head itself lives in the model."""

    def __init__(self):
        self.groups: dict[int, NodeGroup] = {}
        self.history = AccuracyHistory()
        self.expanded_now: dict[int, int] = {}   # class -> node added this task
        self.thresholds: list[dict] = []

    @property
    def seen_classes(self) -> list[int]:
        return sorted(self.groups)

    @property
    def num_nodes(self) -> int:
        return sum(len(g.nodes) for g in self.groups.values())

    def expansion_count(self) -> int:
        """Nodes added beyond each class's first one."""
        return self.num_nodes - len(self.groups)

    def begin_task(self) -> None:
        self.expanded_now = {}

    def add_node(self, head, class_id: int, task: TaskSpec) -> int:
        (node_id,) = head.append_rows(1)
        group = self.groups.setdefault(class_id, NodeGroup(class_id))
        group.nodes.append(Node(node_id, task.task_index, task.domain_id))
        return node_id

    def register_new_classes(self, head, task: TaskSpec) -> list[int]:
        """Give every never-seen class of ``task`` its first node."""
        return [self.add_node(head, c, task) for c in task.class_ids if c not in self.groups]

    def apply_expansions(self, head, task: TaskSpec, decisions: dict) -> list[int]:
        added = []
        for c, dec in sorted(decisions.items()):
            if dec.reason != "new":
                self.thresholds.append({"class_id": c, "task": task.task_index,
                                        "domain": task.domain_id, "warmup_acc": dec.warmup_acc,
                                        "p": dec.p, "delta": dec.delta, "expanded": dec.expand})
            if dec.expand and dec.reason != "new":
                node = self.add_node(head, c, task)
                self.expanded_now[c] = node
                added.append(node)
        return added

    def group(self, class_id: int) -> NodeGroup:
        try:
            return self.groups[class_id]
        except KeyError:
            raise MissingGroup(f"class {class_id} has no node group") from None

    def select(self, raw_logits, classes) -> SelectionPlan:
        """Pick one node per class per sample.

        A class expanded in the current task uses its new node and freezes the
        rest; otherwise the max-logit node wins (ties go to the oldest node).
        """
        raw = np.atleast_2d(np.asarray(raw_logits, dtype=np.float64))
        classes = tuple(classes)
        chosen = np.empty((raw.shape[0], len(classes)), dtype=np.int64)
        frozen, expanded = {}, {}
        for i, c in enumerate(classes):
            ids = self.group(c).node_ids
            if c in self.expanded_now:
                new = self.expanded_now[c]
                chosen[:, i] = new
                frozen[c] = frozenset(n for n in ids if n != new)
                expanded[c] = True
            else:
                ids = np.asarray(ids)
                chosen[:, i] = ids[np.argmax(raw[:, ids], axis=1)]
                frozen[c] = frozenset()
                expanded[c] = False
        return SelectionPlan(classes, chosen, frozen, expanded)

    def class_logits(self, raw_logits, classes=None) -> np.ndarray:
        """Group-max logit per class (inference-time reduction)."""
        raw = np.atleast_2d(np.asarray(raw_logits, dtype=np.float64))
        classes = self.seen_classes if classes is None else classes
        return np.stack([raw[:, self.group(c).node_ids].max(axis=1) for c in classes], axis=1)

    def predict(self, raw_online, raw_ema=None) -> np.ndarray:
        """Class ids from group-max logits, max-ensembled over online and EMA models."""
        classes = np.asarray(self.seen_classes)
        scores = self.class_logits(raw_online)
        if raw_ema is not None:
            scores = np.maximum(scores, self.class_logits(raw_ema))
        return classes[np.argmax(scores, axis=1)]

    def per_class_accuracy(self, raw_logits, labels, classes) -> dict[int, float]:
        pred = self.predict(raw_logits)
        labels = np.asarray(labels)
        out = {}
        for c in classes:
            mask = labels == c
            if mask.any():
                out[int(c)] = float(np.mean(pred[mask] == c))
        return out

    def node_report(self) -> list[dict]:
        rows = []
        for c in self.seen_classes:
            deltas = [t["delta"] for t in self.thresholds if t["class_id"] == c and t["delta"] is not None]
            for node in self.group(c).nodes:
                rows.append({"class_id": c, "node_count": len(self.group(c).nodes),
                             "node_id": node.node_id, "created_task": node.created_task,
                             "created_domain": node.created_domain,
                             "thresholds": ";".join(f"{d:.6f}" for d in deltas)})
        return rows


def ic_loss(raw_logits, chosen, label: int, classes, teacher_logits=None, alpha: float = 1.0,
            distill_selected: bool = False) -> tuple[float, np.ndarray, dict]:
    """Cross-entropy over the selected class logits plus ``alpha``-weighted distillation.

    ``chosen[i]`` is the node standing in for ``classes[i]``. Distillation runs
    over the nodes covered by ``teacher_logits`` (those existing before this
    task), minus the chosen ones unless ``distill_selected``. Returns the loss,
    its gradient over all raw logits, and the two loss parts.
    """
    raw = np.asarray(raw_logits, dtype=np.float64)
    chosen = np.asarray(chosen, dtype=np.int64)
    classes = list(classes)
    if label not in classes:
        raise BadLabel(f"label {label} is not a current-task class {classes}")
    ce, g_cls = softmax_cross_entropy(raw[chosen], classes.index(label))
    grad = np.zeros_like(raw)
    np.add.at(grad, chosen, g_cls)
    kl = 0.0
    if teacher_logits is not None and alpha != 0.0:
        teacher = np.asarray(teacher_logits, dtype=np.float64)
        n_prev = teacher.shape[0]
        skip = set() if distill_selected else set(chosen.tolist())
        nodes = [n for n in range(n_prev) if n not in skip]
        if nodes:
            kl, g_kl = kl_divergence(teacher[nodes], raw[nodes])
            grad[nodes] += alpha * g_kl
    return ce + alpha * kl, grad, {"ce": ce, "kl": kl}


def batch_ic_loss(raw_logits, plan: SelectionPlan, labels, teacher_logits=None,
                  alpha: float = 1.0, distill_selected: bool = False):
    """Mean of :func:`ic_loss` over a batch; gradient already divided by batch size."""
    raw = np.atleast_2d(np.asarray(raw_logits, dtype=np.float64))
    n = raw.shape[0]
    grad = np.zeros_like(raw)
    total = ce = kl = 0.0
    for b in range(n):
        teacher = None if teacher_logits is None else teacher_logits[b]
        loss, g, parts = ic_loss(raw[b], plan.chosen[b], int(labels[b]), plan.classes,
                                 teacher, alpha, distill_selected)
        total += loss
        ce += parts["ce"]
        kl += parts["kl"]
        grad[b] = g
    return total / n, grad / n, {"ce": ce / n, "kl": kl / n}
