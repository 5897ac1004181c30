"""Accuracy, average accuracy/forgetting over a task sequence, and ROC AUC."""

from __future__ import annotations

import csv
import io
from typing import Sequence

import numpy as np

from .numkernel import ParameterError


class MetricError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def acc(preds, labels) -> float:
    """Percentage of correct predictions, 100 * (TP + TN) / n."""
    preds = np.asarray(preds).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if preds.size == 0 or preds.size != labels.size:
        raise ParameterError(f"acc needs equal non-empty inputs, got {preds.size} and {labels.size}")
    return 100.0 * float(np.sum(preds == labels)) / preds.size


class AccuracyMatrix:
    """acc[i][j]: accuracy on task j after training through task i (1-based, j <= i).

    Rows may be missing (an offline run only has the final row).
    """

    def __init__(self, task_names: Sequence[str]):
        self.task_names = list(task_names)
        self.rows: dict[int, list[float]] = {}

    @property
    def num_tasks(self) -> int:
        return len(self.task_names)

    def set_row(self, i: int, values: Sequence[float]) -> None:
        if not 1 <= i <= self.num_tasks:
            raise ParameterError(f"row {i} outside 1..{self.num_tasks}")
        values = [float(v) for v in values]
        if len(values) != i:
            raise StateError(f"row {i} must have exactly {i} entries, got {len(values)}")
        if any(not 0.0 <= v <= 100.0 for v in values):
            raise ParameterError(f"accuracies must lie in [0, 100], got {values}")
        self.rows[i] = values

    def row(self, i: int) -> list[float]:
        if i not in self.rows:
            raise StateError(f"row {i} has not been recorded")
        return self.rows[i]

    def __getitem__(self, ij: tuple[int, int]) -> float:
        i, j = ij
        return self.row(i)[j - 1]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task", *self.task_names])
        for i in sorted(self.rows):
            vals = [repr(v) for v in self.rows[i]]
            w.writerow([self.task_names[i - 1], *vals, *[""] * (self.num_tasks - i)])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def from_csv(cls, path) -> "AccuracyMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:1] != ["after_task"]:
            raise StateError(f"{path}: missing accuracy matrix header")
        names = rows[0][1:]
        m = cls(names)
        for r in rows[1:]:
            i = names.index(r[0]) + 1
            m.set_row(i, [float(v) for v in r[1:1 + i]])
        return m

    def to_dict(self) -> dict:
        return {"tasks": self.task_names, "rows": {str(i): v for i, v in sorted(self.rows.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "AccuracyMatrix":
        m = cls(d["tasks"])
        for i, v in d["rows"].items():
            m.set_row(int(i), v)
        return m

    def __eq__(self, other) -> bool:
        return isinstance(other, AccuracyMatrix) and self.to_dict() == other.to_dict()


def average_accuracy(matrix: AccuracyMatrix, after_task: int) -> float:
    row = matrix.row(after_task)
    return sum(row) / after_task


def average_forgetting(matrix: AccuracyMatrix, after_task: int) -> float:
    """Mean of acc[j][j] - acc[i][j] over the i - 1 earlier tasks. Not clamped."""
    if after_task < 2:
        raise ParameterError(f"forgetting needs at least 2 tasks, got after_task={after_task}")
    last = matrix.row(after_task)
    drops = [matrix.row(j)[j - 1] - last[j - 1] for j in range(1, after_task)]
    return sum(drops) / (after_task - 1)


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of ROC AUC: P(s_pos > s_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size != labels.size:
        raise MetricError(f"{scores.size} scores vs {labels.size} labels")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("auc needs both classes present")
    diff = pos[:, None] - neg[None, :]
    wins = np.count_nonzero(diff > 0)
    ties = np.count_nonzero(diff == 0)
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def summary(matrix: AccuracyMatrix) -> list[dict]:
    """AA/AF at every recorded task boundary (AF is None before task 2 or when rows are missing)."""
    out = []
    for i in sorted(matrix.rows):
        try:
            af = average_forgetting(matrix, i) if i >= 2 else None
        except StateError:
            af = None
        out.append({"after_task": i, "task": matrix.task_names[i - 1],
                    "AA": average_accuracy(matrix, i), "AF": af})
    return out
