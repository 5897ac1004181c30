"""Replay-set scoring (prediction entropy, centroid distance) and selection."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import Model
from .numkernel import ParameterError


class SelectionError(ValueError):
    """Not enough samples (or an empty class) for the requested selection."""


class Strategy(str, enum.Enum):
    OURS = "ours"
    ALL_HARD = "all_hard"
    ALL_EASY = "all_easy"
    ALL_MARGIN = "all_margin"
    ALL_CENTER = "all_center"
    RANDOM = "random"


def entropy(p) -> float:
    """Natural-log entropy of a probability vector, with 0 * log 0 = 0."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if np.any(p < 0):
        raise ParameterError(f"probabilities must be non-negative, got {p.tolist()}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ParameterError(f"probabilities must sum to 1, got sum {p.sum()!r}")
    nz = p[p > 0]
    h = -float(np.sum(nz * np.log(nz)))
    return h if h > 0 else 0.0


def entropies(probs: np.ndarray) -> np.ndarray:
    """Row-wise entropy of an n x C probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return np.maximum(-terms.sum(axis=1), 0.0)


def class_centroids(features, labels) -> tuple[np.ndarray, np.ndarray]:
    """Mean feature vector of the real (0) and fake (1) class."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    out = []
    for cls, name in ((0, "real"), (1, "fake")):
        mask = labels == cls
        if not mask.any():
            raise SelectionError(f"class {cls} ({name}) has no samples; centroid undefined")
        out.append(features[mask].mean(axis=0))
    return out[0], out[1]


@dataclass
class ScoredSample:
    index: int
    label: int
    entropy: float
    centroid_distance: float


def score_samples(model: Model, inputs, labels) -> list[ScoredSample]:
    """Entropy of the model's prediction and distance to the class centroid for each sample."""
    labels = np.asarray(labels, dtype=np.int64)
    pred = model.forward(np.atleast_2d(np.asarray(inputs, dtype=np.float64)))
    feats = pred.features.numpy()
    h = entropies(pred.probs.numpy())
    cents = class_centroids(feats, labels)
    dist = np.array([np.linalg.norm(feats[i] - cents[labels[i]]) for i in range(len(labels))])
    return [ScoredSample(i, int(labels[i]), float(h[i]), float(dist[i])) for i in range(len(labels))]


@dataclass
class Selection:
    """Indices chosen from one task's data, each tagged with the criterion that picked it."""

    indices: list[int]
    criteria: list[str]
    scores: list[ScoredSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.indices)


def _ranked(idx: np.ndarray, key: np.ndarray, descending: bool) -> np.ndarray:
    """Indices of ``idx`` ordered by ``key``; ties keep the lower dataset index first."""
    k = key[idx]
    order = np.argsort(-k if descending else k, kind="stable")
    return idx[order]


def select_from_scores(scores: Sequence[ScoredSample], K: int, strategy: Strategy | str,
                       rng: np.random.Generator | None = None) -> Selection:
    strategy = Strategy(strategy)
    if K <= 0 or K % 4:
        raise ParameterError(f"K must be a positive multiple of 4, got {K}")
    labels = np.array([s.label for s in scores], dtype=np.int64)
    h = np.array([s.entropy for s in scores])
    d = np.array([s.centroid_distance for s in scores])
    per_class = K // 2
    counts = [int((labels == c).sum()) for c in (0, 1)]
    if min(counts) < per_class:
        raise SelectionError(f"need {per_class} samples per class for K={K}, have real={counts[0]} fake={counts[1]}")

    chosen: list[int] = []
    tags: list[str] = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if strategy is Strategy.OURS:
            quarter = K // 4
            hard = _ranked(idx, h, descending=True)
            center = _ranked(idx, d, descending=False)
            picked = [int(i) for i in hard[:quarter]]
            crit = ["hard"] * quarter
            taken = set(picked)
            for i in center[:quarter]:
                if int(i) not in taken:
                    picked.append(int(i))
                    crit.append("center")
                    taken.add(int(i))
            # overlap between the two lists: refill from the next-hardest samples
            for i in hard[quarter:]:
                if len(picked) == per_class:
                    break
                if int(i) not in taken:
                    picked.append(int(i))
                    crit.append("backfill")
                    taken.add(int(i))
        elif strategy is Strategy.RANDOM:
            if rng is None:
                raise ParameterError("random selection needs a seeded generator")
            picked = [int(i) for i in rng.choice(idx, size=per_class, replace=False)]
            crit = ["random"] * per_class
        else:
            key, desc, name = {
                Strategy.ALL_HARD: (h, True, "hard"),
                Strategy.ALL_EASY: (h, False, "easy"),
                Strategy.ALL_MARGIN: (d, True, "margin"),
                Strategy.ALL_CENTER: (d, False, "center"),
            }[strategy]
            picked = [int(i) for i in _ranked(idx, key, desc)[:per_class]]
            crit = [name] * per_class
        chosen += picked
        tags += crit
    return Selection(chosen, tags, list(scores))


def select_replay(model: Model, inputs, labels, K: int, strategy: Strategy | str = Strategy.OURS,
                  rng: np.random.Generator | None = None) -> Selection:
    """Pick K samples (K/2 per class) from a task's data using ``strategy``.

    ``model`` is the one just trained on this task; it scores every sample.
    """
    return select_from_scores(score_samples(model, inputs, labels), K, strategy, rng)


@dataclass
class ReplayEntry:
    task_id: int
    index: int
    x: np.ndarray
    label: int
    entropy: float
    centroid_distance: float
    criterion: str


class ReplaySet:
    """Unbounded accumulation of per-task selections."""

    def __init__(self) -> None:
        self.entries: list[ReplayEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, task_id: int, inputs, selection: Selection) -> list[ReplayEntry]:
        inputs = np.asarray(inputs, dtype=np.float64)
        if len(set(selection.indices)) != len(selection.indices):
            raise SelectionError(f"task {task_id}: duplicate samples in selection")
        new = []
        for i, crit in zip(selection.indices, selection.criteria):
            s = selection.scores[i]
            new.append(ReplayEntry(task_id, i, inputs[i].copy(), s.label, s.entropy, s.centroid_distance, crit))
        self.entries += new
        return new

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.entries:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return (np.stack([e.x for e in self.entries]),
                np.array([e.label for e in self.entries], dtype=np.int64))

    def task_sizes(self) -> dict[int, int]:
        sizes: dict[int, int] = {}
        for e in self.entries:
            sizes[e.task_id] = sizes.get(e.task_id, 0) + 1
        return sizes


AUDIT_COLUMNS = ["sample_id", "label", "task_id", "entropy", "centroid_distance", "criterion"]


def write_audit_csv(path, entries: Sequence[ReplayEntry]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AUDIT_COLUMNS)
        for e in entries:
            w.writerow([e.index, e.label, e.task_id, repr(e.entropy), repr(e.centroid_distance), e.criterion])


def read_audit_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["sample_id"] = int(r["sample_id"])
        r["label"] = int(r["label"])
        r["task_id"] = int(r["task_id"])
        r["entropy"] = float(r["entropy"])
        r["centroid_distance"] = float(r["centroid_distance"])
    return rows


def max_entropy(num_classes: int = 2) -> float:
    return math.log(num_classes)
