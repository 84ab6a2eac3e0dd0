"""Synthetic multi-domain data and the four incremental task-stream shapes."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.linalg import expm, logm

from .errors import BadConfig, BadKind, DataCoverageError, DimMismatch, ParseError
from .numerics import make_rng

# domain id used for class-incremental tasks, which pool every domain
ALL_DOMAINS = -1


class StreamKind(str, Enum):
    CIL = "cil"
    DIL = "dil"
    VIL = "vil"
    CDIL = "cdil"

    @classmethod
    def parse(cls, value) -> "StreamKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise BadKind(f"unknown scenario kind {value!r} (expected one of {choices})",
                          path="scenario.kind") from None


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    class_id: int
    domain_id: int


@dataclass
class DatasetCell:
    """All samples of one (class, domain) pair, stored as feature matrices."""

    class_id: int
    domain_id: int
    train: np.ndarray
    test: np.ndarray

    def samples(self, split: str = "train") -> list[Sample]:
        return [Sample(x, self.class_id, self.domain_id) for x in getattr(self, split)]


@dataclass(frozen=True)
class TaskSpec:
    task_index: int
    domain_id: int
    class_ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(c) for c in self.class_ids)
        if not ids or list(ids) != sorted(set(ids)):
            raise BadConfig(f"task class ids must be non-empty, sorted and unique: {ids}")
        object.__setattr__(self, "class_ids", ids)


@dataclass(frozen=True)
class TaskStream:
    kind: StreamKind
    tasks: tuple[TaskSpec, ...]

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def cells(self) -> list[tuple[tuple[int, ...], int]]:
        return [(t.class_ids, t.domain_id) for t in self.tasks]


def _domain_rotation(rng, dim, strength):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    if strength == 0:
        return np.eye(dim)
    # geodesic from the identity towards q on SO(dim)
    gen = np.real(logm(q))
    gen = 0.5 * (gen - gen.T)
    return expm(strength * gen)


def synth_dataset(num_classes: int, num_domains: int, dim: int, per_cell: int,
                  shift_strength: float, noise_sigma: float, test_fraction: float = 0.25,
                  seed: int = 0, translation_scale: float = 1.0) -> list[DatasetCell]:
    """Gaussian class prototypes seen through per-domain rotations and translations.

    A sample of class ``c`` in domain ``d`` is ``R_d (mu_c + noise) + t_d``.
    ``R_d`` moves along the geodesic from the identity to a random rotation as
    ``shift_strength`` goes from 0 to 1, and ``||t_d||`` grows linearly with it.
    """
    if num_classes < 1 or num_domains < 1 or dim < 1:
        raise BadConfig("num_classes, num_domains and dim must be positive")
    if per_cell < 4:
        raise BadConfig("per_cell must be at least 4", path="dataset.per_cell")
    if shift_strength < 0:
        raise BadConfig("shift_strength must be >= 0", path="dataset.shift_strength")
    if noise_sigma <= 0:
        raise BadConfig("noise_sigma must be > 0", path="dataset.noise_sigma")
    if not 0 < test_fraction < 1:
        raise BadConfig("test_fraction must lie in (0, 1)", path="dataset.test_fraction")

    prototypes = make_rng(seed, 1).standard_normal((num_classes, dim))
    rotations, offsets = [], []
    for d in range(num_domains):
        rng = make_rng(seed, 2, d)
        rotations.append(_domain_rotation(rng, dim, shift_strength))
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        offsets.append(shift_strength * translation_scale * np.sqrt(dim) * direction)

    n_test = min(per_cell - 1, max(1, int(round(per_cell * test_fraction))))
    cells = []
    for c in range(num_classes):
        for d in range(num_domains):
            noise = make_rng(seed, 3, c, d).normal(0.0, noise_sigma, size=(per_cell, dim))
            x = (prototypes[c] + noise) @ rotations[d].T + offsets[d]
            cells.append(DatasetCell(c, d, x[n_test:].copy(), x[:n_test].copy()))
    return cells


def generate_stream(kind, num_classes: int, num_domains: int, classes_per_task: int,
                    seed: int = 0) -> TaskStream:
    kind = StreamKind.parse(kind)
    if classes_per_task < 1 or num_classes % classes_per_task:
        raise BadConfig(f"classes_per_task={classes_per_task} does not divide "
                        f"num_classes={num_classes}", path="scenario.classes_per_task")
    n_groups = num_classes // classes_per_task
    groups = [tuple(range(g * classes_per_task, (g + 1) * classes_per_task))
              for g in range(n_groups)]
    rng = make_rng(seed, 10)
    if kind is StreamKind.CIL:
        cells = [(groups[g], ALL_DOMAINS) for g in rng.permutation(n_groups)]
    elif kind is StreamKind.DIL:
        everything = tuple(range(num_classes))
        cells = [(everything, int(d)) for d in rng.permutation(num_domains)]
    elif kind is StreamKind.VIL:
        grid = [(groups[g], d) for g in range(n_groups) for d in range(num_domains)]
        cells = [grid[i] for i in rng.permutation(len(grid))]
    else:
        n = min(n_groups, num_domains)
        gs = rng.permutation(n_groups)[:n]
        ds = rng.permutation(num_domains)[:n]
        cells = [(groups[g], int(d)) for g, d in zip(gs, ds)]
    tasks = tuple(TaskSpec(t, int(d), cls) for t, (cls, d) in enumerate(cells))
    return TaskStream(kind, tasks)


def index_cells(cells) -> dict[tuple[int, int], DatasetCell]:
    return {(c.class_id, c.domain_id): c for c in cells}


def task_data(cells, task: TaskSpec, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Stack the ``split`` samples of every cell the task covers into ``(X, y)``."""
    index = cells if isinstance(cells, dict) else index_cells(cells)
    chosen = []
    for c in task.class_ids:
        if task.domain_id == ALL_DOMAINS:
            found = [cell for (cc, _), cell in sorted(index.items()) if cc == c]
            if not found:
                raise DataCoverageError(f"task {task.task_index}: no data for class {c}")
            chosen.extend(found)
        else:
            cell = index.get((c, task.domain_id))
            if cell is None:
                raise DataCoverageError(
                    f"task {task.task_index}: missing cell (class={c}, domain={task.domain_id})")
            chosen.append(cell)
    xs = [getattr(cell, split) for cell in chosen]
    ys = [np.full(len(x), cell.class_id, dtype=np.int64) for x, cell in zip(xs, chosen)]
    dim = next((x.shape[1] for x in xs if x.ndim == 2 and x.shape[0]), 0)
    if not any(len(x) for x in xs):
        return np.zeros((0, dim)), np.zeros(0, dtype=np.int64)
    return np.vstack([x for x in xs if len(x)]), np.concatenate(ys)


def check_coverage(cells, stream: TaskStream) -> None:
    index = cells if isinstance(cells, dict) else index_cells(cells)
    for task in stream:
        task_data(index, task, "train")


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(path, dim: int) -> list[DatasetCell]:
    """Read rows of ``class_id,domain_id,split,f_0..f_{dim-1}`` into cells."""
    buckets: dict[tuple[int, int], dict[str, list]] = {}
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not field.strip() for field in row):
                continue
            if lineno == 1 and not _is_number(row[0].strip()):
                continue  # header
            if len(row) < 3:
                raise ParseError(f"expected at least 3 fields, got {len(row)}", lineno)
            try:
                class_id = int(row[0])
                domain_id = int(row[1])
            except ValueError:
                raise ParseError(f"non-integer class/domain id in {row[:2]}", lineno) from None
            split = row[2].strip()
            if split not in ("train", "test"):
                raise ParseError(f"split must be 'train' or 'test', got {split!r}", lineno)
            if class_id < 0 or domain_id < 0:
                raise ParseError("class and domain ids must be non-negative", lineno)
            feats = row[3:]
            if len(feats) != dim:
                raise DimMismatch(f"line {lineno}: expected {dim} features, got {len(feats)}")
            try:
                values = [float(f) for f in feats]
            except ValueError:
                raise ParseError("non-numeric feature value", lineno) from None
            if not np.all(np.isfinite(values)):
                raise ParseError("non-finite feature value", lineno)
            bucket = buckets.setdefault((class_id, domain_id), {"train": [], "test": []})
            bucket[split].append(values)
    cells = []
    for (c, d), bucket in sorted(buckets.items()):
        train = np.array(bucket["train"], dtype=np.float64).reshape(-1, dim)
        test = np.array(bucket["test"], dtype=np.float64).reshape(-1, dim)
        cells.append(DatasetCell(c, d, train, test))
    return cells
