"""Accuracy matrix bookkeeping and the ACC / BWT summaries."""

from typing import List, Optional, Tuple

import numpy as np

from ..errors import ValidationError


class AccuracyMatrix:
    """
    a[t][i]: accuracy on the i-th merged task after merging the t-th

    Indices follow merge positions, so only the lower triangle is ever filled
    and every entry is recorded exactly once.
    """

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise ValidationError("num_tasks must be at least 1", parameter="num_tasks")
        self.num_tasks = num_tasks
        self.values = np.full((num_tasks, num_tasks), np.nan)

    def record(self, t: int, i: int, value: float) -> None:
        if not 0 <= i <= t < self.num_tasks:
            raise ValidationError(f"entry ({t}, {i}) is outside the lower triangle", parameter="t")
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"accuracy {value} outside [0, 1]", parameter="value")
        if not np.isnan(self.values[t, i]):
            raise ValidationError(f"entry ({t}, {i}) was already recorded", parameter="t")
        self.values[t, i] = value

    def row(self, t: int) -> np.ndarray:
        return self.values[t, : t + 1].copy()

    def is_complete(self) -> bool:
        return not np.isnan(self.values[np.tril_indices(self.num_tasks)]).any()

    def to_list(self) -> List[List[Optional[float]]]:
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.values]

    @classmethod
    def from_list(cls, rows: List[List[Optional[float]]]) -> "AccuracyMatrix":
        matrix = cls(len(rows))
        for t, row in enumerate(rows):
            for i, value in enumerate(row):
                if value is not None:
                    matrix.record(t, i, float(value))
        return matrix


def compute_metrics(matrix: AccuracyMatrix) -> Tuple[float, float]:
    """
    ACC: mean of the final row. BWT: mean over earlier tasks of final minus
    just-merged accuracy; 0 for a single task.
    """
    if not matrix.is_complete():
        raise ValidationError("accuracy matrix is incomplete", parameter="matrix")
    t = matrix.num_tasks
    final = matrix.values[t - 1]
    acc = float(np.mean(final))
    if t == 1:
        return acc, 0.0
    diagonal = np.diag(matrix.values)
    bwt = float(np.mean(final[: t - 1] - diagonal[: t - 1]))
    return acc, bwt


def accuracy_trend(matrix: AccuracyMatrix) -> List[float]:
    """Mean accuracy over the tasks seen so far, after every merge"""
    return [float(np.mean(matrix.row(t))) for t in range(matrix.num_tasks) if not np.isnan(matrix.row(t)).any()]
