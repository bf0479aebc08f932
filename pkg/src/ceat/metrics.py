"""Accuracy matrix and the two incremental-learning summary metrics."""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class AccuracyMatrix:
    """Lower-triangular record of test results.

    ``correct[t][j]`` / ``total[t][j]`` count task-j test samples classified
    correctly after finishing task t (j <= t).
    """

    num_tasks: int
    correct: list[list[int]] = field(default_factory=list)
    total: list[list[int]] = field(default_factory=list)

    def record(self, t: int, correct: list[int], total: list[int]) -> None:
        if t != len(self.correct):
            raise ValueError(f"expected results for task {len(self.correct)}, got {t}")
        if len(correct) != t + 1 or len(total) != t + 1:
            raise ValueError("row must cover tasks 0..t")
        self.correct.append([int(c) for c in correct])
        self.total.append([int(n) for n in total])

    @property
    def completed(self) -> int:
        return len(self.correct)

    def accuracy(self, t: int, j: int) -> float:
        return self.correct[t][j] / self.total[t][j]

    def rows(self) -> list[list[float]]:
        return [[self.accuracy(t, j) for j in range(t + 1)] for t in range(self.completed)]

    def overall(self, t: int) -> float:
        """Accuracy on the union of test sets 0..t after task t."""
        return sum(self.correct[t]) / sum(self.total[t])

    def overall_series(self) -> list[float]:
        return [self.overall(t) for t in range(self.completed)]

    def to_dict(self) -> dict:
        return {"num_tasks": self.num_tasks, "correct": self.correct, "total": self.total}

    @classmethod
    def from_dict(cls, d: dict) -> "AccuracyMatrix":
        return cls(d["num_tasks"], [list(r) for r in d["correct"]], [list(r) for r in d["total"]])


def _require_complete(rows, num_tasks):
    if num_tasks is not None and len(rows) != num_tasks:
        raise ValueError(f"incomplete matrix: {len(rows)} of {num_tasks} tasks")
    for t, row in enumerate(rows):
        if len(row) < t + 1:
            raise ValueError(f"row {t} has {len(row)} entries, needs {t + 1}")


def average_incremental_accuracy(overall: list[float], num_tasks: int | None = None) -> float:
    """Mean over checkpoints of accuracy on all classes seen so far."""
    if not overall:
        raise ValueError("incomplete matrix: no tasks")
    if num_tasks is not None and len(overall) != num_tasks:
        raise ValueError(f"incomplete matrix: {len(overall)} of {num_tasks} tasks")
    return sum(overall) / len(overall)


def average_forgetting(rows: list[list[float]], num_tasks: int | None = None) -> float:
    """Mean over old tasks j < T of (best accuracy on j after any t >= j) - (final accuracy on j)."""
    _require_complete(rows, num_tasks)
    last = len(rows) - 1
    if last < 1:
        return 0.0
    drops = []
    for j in range(last):
        peak = max(rows[t][j] for t in range(j, last + 1))
        drops.append(peak - rows[last][j])
    return sum(drops) / len(drops)
