"""Slow, independent reference computations used to cross-check the fast paths.

Nothing here touches the gradient tape or the vectorised selection code.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def matmul_loop(a, b) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def _cos(u: Sequence[float], v: Sequence[float]) -> float:
    dot = sum(x * y for x, y in zip(u, v))
    return dot / (math.sqrt(sum(x * x for x in u)) * math.sqrt(sum(y * y for y in v)))


def scl_term_by_term(features, labels, tau: float) -> float:
    """Direct scalar transcription of the supervised contrastive objective."""
    feats = [list(map(float, r)) for r in np.asarray(features)]
    y = [int(v) for v in labels]
    B = len(y)
    total = 0.0
    for i in range(B):
        n_pos = sum(1 for j in range(B) if j != i and y[j] == y[i])
        if n_pos == 0:
            continue
        acc = 0.0
        for j in range(B):
            if j == i or y[j] != y[i]:
                continue
            num = math.exp(_cos(feats[i], feats[j]) / tau)
            neg = sum(math.exp(_cos(feats[i], feats[k]) / tau) for k in range(B) if y[k] != y[i])
            acc += math.log(num / (num + neg))
        total += -acc / n_pos
    return total


def softmax_direct(z: Sequence[float], T: float) -> list[float]:
    e = [math.exp(v / T) for v in z]
    s = sum(e)
    return [v / s for v in e]


def kd_direct(teacher_logits, student_logits, T: float) -> float:
    total = 0.0
    for t, s in zip(np.atleast_2d(teacher_logits), np.atleast_2d(student_logits)):
        pt, ps = softmax_direct(t, T), softmax_direct(s, T)
        total -= sum(a * math.log(b) for a, b in zip(pt, ps))
    return total


def entropy_direct(p: Sequence[float]) -> float:
    return -sum(v * math.log(v) for v in p if v > 0)


def ce_direct(probs_real: Sequence[float], labels: Sequence[int]) -> float:
    """Per-sample binary cross-entropy on the real-class probability, summed."""
    total = 0.0
    for p0, y in zip(probs_real, labels):
        total -= math.log(p0) if y == 0 else math.log(1.0 - p0)
    return total


def replay_bruteforce(entropy: Sequence[float], distance: Sequence[float], labels: Sequence[int],
                      K: int, strategy: str) -> set[int]:
    """Full sort of (key, index) pairs per class; lower index wins ties.

    Covers every deterministic strategy (all but ``random``).
    """
    per_class, quarter = K // 2, K // 4
    chosen: set[int] = set()
    for cls in (0, 1):
        idx = [i for i, y in enumerate(labels) if y == cls]
        by_hard = sorted(idx, key=lambda i: (-entropy[i], i))
        by_easy = sorted(idx, key=lambda i: (entropy[i], i))
        by_center = sorted(idx, key=lambda i: (distance[i], i))
        by_margin = sorted(idx, key=lambda i: (-distance[i], i))
        if strategy == "ours":
            picked = set(by_hard[:quarter]) | set(by_center[:quarter])
            for i in by_hard:
                if len(picked) >= per_class:
                    break
                picked.add(i)
        else:
            order = {"all_hard": by_hard, "all_easy": by_easy,
                     "all_center": by_center, "all_margin": by_margin}[strategy]
            picked = set(order[:per_class])
        chosen |= picked
    return chosen


def auc_trapezoid(scores, labels) -> float:
    """Area under the empirical ROC curve by the trapezoid rule, thresholds at distinct scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    P = int(np.sum(labels == 1))
    N = int(np.sum(labels == 0))
    pts = [(0.0, 0.0)]
    tp = fp = 0
    for s in sorted(set(scores.tolist()), reverse=True):
        at = scores == s
        tp += int(np.sum(at & (labels == 1)))
        fp += int(np.sum(at & (labels == 0)))
        pts.append((fp / N, tp / P))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def mean_loop(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    out = np.zeros(rows.shape[1])
    for r in rows:
        out += r
    return out / len(rows)
