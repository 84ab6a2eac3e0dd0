"""Dense math substrate: seeded randomness, cosine, softmax losses, K-Means.

Everything works on float64 numpy arrays. Vectors are 1-D arrays and
matrices are 2-D row-major arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadK, BadLabel, DegenerateVector, DimMismatch, EmptyInput

EPS = 1e-8


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and an optional stream path.

    Distinct ``stream`` tuples give independent sequences, so consumers that
    are switched on or off never shift each other's draws.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(s) for s in stream)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def as_vector(x, name="vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimMismatch(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def cosine_similarity(u, v) -> float:
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if u.shape != v.shape:
        raise DimMismatch(f"cosine of vectors with dims {u.size} and {v.size}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < EPS or nv < EPS:
        raise DegenerateVector(f"norm below {EPS}: |u|={nu:.3g}, |v|={nv:.3g}")
    c = float(u @ v) / (nu * nv)
    return min(1.0, max(-1.0, c))


def cosine_grad(u: np.ndarray, v: np.ndarray) -> tuple[float, np.ndarray]:
    """Cosine of ``u`` and ``v`` plus its gradient with respect to ``u``."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < EPS or nv < EPS:
        raise DegenerateVector(f"norm below {EPS}: |u|={nu:.3g}, |v|={nv:.3g}")
    c = float(u @ v) / (nu * nv)
    grad = v / (nu * nv) - c * u / (nu * nu)
    return c, grad


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    logits = as_vector(logits, "logits")
    if not 0 <= label < logits.size:
        raise BadLabel(f"label {label} outside [0, {logits.size})")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


def kl_divergence(p_logits, q_logits) -> tuple[float, np.ndarray]:
    """KL(softmax(p) || softmax(q)) and its gradient w.r.t. ``q_logits``.

    ``p`` is the fixed reference (teacher), ``q`` the trained distribution.
    """
    p_logits = as_vector(p_logits, "p_logits")
    q_logits = as_vector(q_logits, "q_logits")
    if p_logits.shape != q_logits.shape:
        raise DimMismatch(f"KL between dims {p_logits.size} and {q_logits.size}")
    logp = log_softmax(p_logits)
    logq = log_softmax(q_logits)
    p = np.exp(logp)
    loss = float(np.sum(p * (logp - logq)))
    return loss, np.exp(logq) - p


def finite_difference_gradient(f, theta, h: float = 1e-5) -> np.ndarray:
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        fp = f(theta.copy())
        theta[i] = orig - h
        fm = f(theta.copy())
        theta[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class ClusterResult:
    centers: np.ndarray
    assignments: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)
    restart_histories: list[list[float]] = field(default_factory=list)


def sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _plusplus_init(points, k, rng):
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    closest = sq_distances(points, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        centers.append(points[idx])
        closest = np.minimum(closest, sq_distances(points, points[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(points, centers, max_iters):
    history = []
    assign = None
    for _ in range(max_iters):
        d2 = sq_distances(points, centers)
        new_assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(points)), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(centers.shape[0]):
            members = points[assign == j]
            # an emptied cluster keeps its old center
            if len(members):
                centers[j] = members.mean(axis=0)
    d2 = sq_distances(points, centers)
    assign = np.argmin(d2, axis=1)
    objective = float(d2[np.arange(len(points)), assign].sum())
    history.append(objective)
    return centers, assign, objective, history


def kmeans(points, k: int, rng: np.random.Generator, restarts: int = 10,
           max_iters: int = 100) -> ClusterResult:
    """Lloyd's algorithm with k-means++ seeding; the best of ``restarts`` runs wins.

    Ties in assignment go to the lowest center index. ``history`` on the
    result holds the per-iteration objective of the winning restart;
    ``restart_histories`` keeps one such trace per restart.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise EmptyInput("kmeans on an empty point set")
    if pts.ndim == 1:
        pts = pts[:, None]
    if not 1 <= k <= pts.shape[0]:
        raise BadK(f"k={k} outside [1, {pts.shape[0]}]")
    best = None
    traces = []
    for _ in range(max(1, restarts)):
        centers = _plusplus_init(pts, k, rng)
        centers, assign, obj, hist = _lloyd(pts, centers.copy(), max_iters)
        traces.append(hist)
        if best is None or obj < best.objective:
            best = ClusterResult(centers, assign, obj, hist)
    best.restart_histories = traces
    return best
