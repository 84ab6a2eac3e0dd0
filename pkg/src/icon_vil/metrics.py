"""Average accuracy, forgetting and the cross-scenario average.

Sums use ``math.fsum`` so results do not depend on summation order.
"""
from __future__ import annotations

import math

from .errors import EmptyList, IncompleteMatrix


class EvalMatrix:
    """Lower-triangular ``a[n][i]``: accuracy on task ``i`` after training task ``n`` (0-based)."""

    def __init__(self, rows=None):
        self.rows: list[list[float]] = []
        for row in rows or []:
            self.append_row(row)

    def append_row(self, row) -> None:
        row = [float(v) for v in row]
        if len(row) != len(self.rows) + 1:
            raise IncompleteMatrix(f"row {len(self.rows)} needs {len(self.rows) + 1} entries")
        if any(not 0.0 <= v <= 1.0 for v in row):
            raise ValueError("accuracies must lie in [0, 1]")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, n):
        return self.rows[n]

    def to_csv(self) -> str:
        return "".join(",".join(repr(v) for v in row) + "\n" for row in self.rows)

    @classmethod
    def from_csv(cls, text: str) -> "EvalMatrix":
        return cls([[float(v) for v in line.split(",")] for line in text.splitlines() if line])


def _rows(m, T):
    rows = m.rows if isinstance(m, EvalMatrix) else [list(r) for r in m]
    if T is None:
        T = len(rows)
    if T < 1 or len(rows) < T or any(len(rows[n]) < n + 1 for n in range(T)):
        raise IncompleteMatrix(f"matrix does not have {T} filled rows")
    return rows, T


def average_accuracy(m, T: int | None = None) -> float:
    rows, T = _rows(m, T)
    return math.fsum(rows[T - 1][:T]) / T


def forgetting(m, T: int | None = None) -> float:
    """Mean over earlier tasks of best-past accuracy minus final accuracy (0 when T == 1).

    Negative per-task values (backward transfer) are kept as they are.
    """
    rows, T = _rows(m, T)
    if T == 1:
        return 0.0
    final = rows[T - 1]
    drops = [max(rows[k][i] for k in range(i, T - 1)) - final[i] for i in range(T - 1)]
    return math.fsum(drops) / (T - 1)


def scenario_average(avg_accs) -> float:
    values = [float(a) for a in avg_accs]
    if not values:
        raise EmptyList("no scenario accuracies")
    return math.fsum(values) / len(values)
