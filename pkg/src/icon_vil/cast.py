"""Adapter-shift pool and the cluster-based shift-direction penalty.

A shift is the flattened change of the adapter parameters over (part of) a
task. Finished-task shifts live in a pool that is re-clustered with K-Means
at every task boundary. During training the current shift is assigned to its
nearest cluster, and the penalty is a distance-weighted sum of its cosines
with every pooled shift from the *other* clusters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch, NoCenters
from .numerics import EPS, cosine_grad, kmeans


@dataclass
class ShiftVector:
    values: np.ndarray
    task_id: int
    snapshot_idx: int = 0
    degenerate: bool = False

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass
class ShiftPool:
    k_configured: int = 2
    shifts_per_task: int = 1
    shifts: list[ShiftVector] = field(default_factory=list)
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    assignments: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.shifts)

    @property
    def k_effective(self) -> int:
        return min(self.k_configured, len(self.shifts))

    def matrix(self) -> np.ndarray:
        return np.array([s.values for s in self.shifts])

    def dump(self) -> list[dict]:
        """One record per shift: task, snapshot index, cluster, norm, full vector."""
        out = []
        for i, s in enumerate(self.shifts):
            assigned = int(self.assignments[i]) if i < len(self.assignments) else -1
            out.append({"task_id": s.task_id, "snapshot_idx": s.snapshot_idx,
                        "assignment": assigned, "norm": s.norm,
                        "degenerate": s.degenerate, "vector": s.values.tolist()})
        return out


@dataclass
class CastDetail:
    cluster: int | None = None
    indices: list[int] = field(default_factory=list)
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cosines: np.ndarray = field(default_factory=lambda: np.zeros(0))


def compute_shift(a_after, a_prev) -> np.ndarray:
    a_after = np.asarray(a_after, dtype=np.float64)
    a_prev = np.asarray(a_prev, dtype=np.float64)
    if a_after.shape != a_prev.shape:
        raise LengthMismatch(f"shift of lengths {a_after.size} and {a_prev.size}")
    return a_after - a_prev


def recluster(pool: ShiftPool, rng: np.random.Generator, restarts: int = 10,
              max_iters: int = 100) -> None:
    if not pool.shifts or pool.k_configured < 1:
        pool.centers = np.zeros((0, 0))
        pool.assignments = np.zeros(0, dtype=np.int64)
        return
    result = kmeans(pool.matrix(), pool.k_effective, rng, restarts=restarts, max_iters=max_iters)
    pool.centers = result.centers
    pool.assignments = np.asarray(result.assignments, dtype=np.int64)


def assign_cluster(v, pool: ShiftPool) -> int:
    if pool.centers.size == 0:
        raise NoCenters("shift pool has no cluster centers")
    diff = pool.centers - np.asarray(v, dtype=np.float64)[None, :]
    return int(np.argmin(np.einsum("ij,ij->i", diff, diff)))


def cast_terms(v_cur: np.ndarray, others: np.ndarray, weights: np.ndarray):
    """Weighted cosine sum with the weights held fixed; returns ``(loss, grad, cosines)``."""
    loss = 0.0
    grad = np.zeros_like(v_cur)
    cosines = np.zeros(len(others))
    for j, (other, w) in enumerate(zip(others, weights)):
        c, g = cosine_grad(v_cur, other)
        cosines[j] = c
        loss += w * c
        grad += w * g
    return loss, grad, cosines


def cast_loss(v_cur, pool: ShiftPool) -> tuple[float, np.ndarray, CastDetail]:
    """Penalty value, its gradient w.r.t. the current shift, and the per-term detail.

    Weights and the cluster assignment are constants of the call: the
    returned gradient flows through the cosine terms only.
    """
    v_cur = np.asarray(v_cur, dtype=np.float64)
    zero = np.zeros_like(v_cur)
    detail = CastDetail()
    if not pool.shifts or pool.centers.size == 0 or np.linalg.norm(v_cur) < EPS:
        return 0.0, zero, detail
    if pool.k_configured == 1:
        # a single cluster means "regularize against the whole history"
        candidates = range(len(pool.shifts))
    else:
        detail.cluster = assign_cluster(v_cur, pool)
        candidates = [j for j, a in enumerate(pool.assignments) if a != detail.cluster]
    idx = [j for j in candidates if pool.shifts[j].norm >= EPS]
    if not idx:
        return 0.0, zero, detail
    others = np.array([pool.shifts[j].values for j in idx])
    dist = np.linalg.norm(others - v_cur[None, :], axis=1)
    total = dist.sum()
    if total <= 0:
        return 0.0, zero, detail
    weights = dist / total
    loss, grad, cosines = cast_terms(v_cur, others, weights)
    detail.indices, detail.weights, detail.cosines = idx, weights, cosines
    return float(loss), grad, detail


def snapshot_milestones(num_steps: int, shifts_per_task: int) -> list[int]:
    """Optimizer-step counts after which a shift snapshot is taken (last = task end)."""
    return [math.ceil(j * num_steps / shifts_per_task) for j in range(1, shifts_per_task + 1)]


def snapshot_task_shifts(pool: ShiftPool, task_id: int, a_prev, snapshots,
                         rng: np.random.Generator) -> list[ShiftVector]:
    """Append one shift per snapshot (at most ``shifts_per_task``) and re-cluster.

    ``snapshots`` are flat adapter vectors taken at the schedule milestones;
    missing ones (e.g. a task with no optimizer steps) fall back to ``a_prev``.
    """
    snaps = list(snapshots)[:pool.shifts_per_task]
    while len(snaps) < pool.shifts_per_task:
        snaps.append(snaps[-1] if snaps else a_prev)
    added = []
    for i, snap in enumerate(snaps):
        values = compute_shift(snap, a_prev)
        shift = ShiftVector(values, task_id, i, degenerate=bool(np.linalg.norm(values) < EPS))
        pool.shifts.append(shift)
        added.append(shift)
    recluster(pool, rng)
    return added
