"""Cross-entropy, supervised contrastive, and two distillation losses.

All functions take and return :class:`~dfil.numkernel.Tensor` values so
they differentiate through a tape. Teacher-side inputs are always detached.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .model import Model
from .numkernel import DimensionError, NumericError, ParameterError, Tensor

PROB_EPS = 1e-12


class ProtocolError(RuntimeError):
    """Teacher/student protocol violated (e.g. no teacher after task 1)."""


class SingleClassBatchWarning(UserWarning):
    pass


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    kd_temperature: float = 20.0
    scl_temperature: float = 0.1
    mean_reduction: bool = False
    kd_t_squared: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("kd_temperature", "scl_temperature"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0, got {getattr(self, name)}")


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    sources: list = field(default_factory=list)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) < 1 or len(self.labels) != len(self.inputs):
            raise ParameterError(f"batch needs >= 1 sample with one label each, got {len(self.inputs)} inputs "
                                 f"and {len(self.labels)} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise ParameterError("labels must be 0 (real) or 1 (fake)")
        if not self.sources:
            self.sources = ["new"] * len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)


def _labels(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if not np.isin(y, (0, 1)).all():
        raise ParameterError("labels must be 0 (real) or 1 (fake)")
    return y


def loss_ce(logits: Tensor, labels) -> Tensor:
    """Summed binary cross-entropy on the real-class probability.

    Per sample: -[(1 - y) log p_real + y log(1 - p_real)], with p clamped to
    [1e-12, 1 - 1e-12]. ``logits`` is B x 2.
    """
    y = _labels(labels)
    if y.size == 0:
        raise ParameterError("cross-entropy of an empty batch")
    if logits.shape != (y.size, 2):
        raise DimensionError(f"logits {list(logits.shape)} do not match {y.size} labels")
    logp = nk.log_softmax(logits, 1.0)
    picked = nk.take_columns(logp, y)
    picked = nk.clip(picked, math.log(PROB_EPS), math.log1p(-PROB_EPS))
    return -nk.sum_(picked)


def cosine_similarity(features: Tensor) -> Tensor:
    norms_sq = np.square(features.data).sum(axis=1)
    if np.any(norms_sq == 0):
        raise NumericError("zero-norm feature vector: cosine similarity undefined")
    norms = nk.sqrt(nk.sum_(features * features, axis=1, keepdims=True))
    unit = features / norms
    return nk.matmul(unit, unit.T)


def loss_scl(features: Tensor, labels, tau: float = 0.1) -> Tensor:
    """Supervised contrastive loss over cosine similarities.

    For every anchor with at least one positive, averages
    -log(e_ij / (e_ij + sum_{k: y_k != y_i} e_ik)) over its positives j,
    with e = exp(s / tau); anchors are summed. Anchors without positives
    contribute nothing.
    """
    if not tau > 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    y = _labels(labels)
    if len(features.shape) != 2 or features.shape[0] != y.size:
        raise DimensionError(f"features {list(features.shape)} do not match {y.size} labels")
    if y.size < 2:
        raise ParameterError("supervised contrastive loss needs at least 2 samples")
    same = y[:, None] == y[None, :]
    pos = same & ~np.eye(y.size, dtype=bool)
    neg = ~same
    n_pos = pos.sum(axis=1)
    sim = cosine_similarity(features)
    if not neg.any():
        warnings.warn("single-class batch: supervised contrastive loss is 0", SingleClassBatchWarning,
                      stacklevel=2)
        return nk.sum_(features * 0.0)
    # cosine <= 1, so shifting by 1/tau keeps exp bounded; the ratio is unchanged
    logits = (sim - 1.0) * (1.0 / tau)
    e = nk.exp(logits)
    neg_sum = nk.sum_(e * neg.astype(np.float64), axis=1, keepdims=True)
    denom = e + neg_sum
    term = nk.log(denom) - logits
    weight = np.divide(pos, n_pos[:, None], out=np.zeros(pos.shape), where=n_pos[:, None] > 0)
    return nk.sum_(term * weight)


def loss_kd(teacher_logits, student_logits: Tensor, temperature: float = 20.0) -> Tensor:
    """-sum_i sum_j p_t(j) log p_s(j) with temperature-T softmaxes; teacher is constant."""
    t = nk.constant(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits)
    if t.shape != student_logits.shape:
        raise DimensionError(f"teacher logits {list(t.shape)} vs student logits {list(student_logits.shape)}")
    p_t = nk.softmax(t, temperature).data
    log_ps = nk.log_softmax(student_logits, temperature)
    log_ps = nk.clip(log_ps, math.log(PROB_EPS), 0.0)
    return -nk.sum_(log_ps * p_t)


def loss_fd(teacher_features, student_features: Tensor) -> Tensor:
    """Summed squared Euclidean distance between feature rows; teacher is constant."""
    t = teacher_features.data if isinstance(teacher_features, Tensor) else np.asarray(teacher_features)
    if t.shape != student_features.shape:
        raise DimensionError(f"teacher features {list(t.shape)} vs student features {list(student_features.shape)}")
    diff = student_features - Tensor(t)
    return nk.sum_(diff * diff)


@dataclass
class LossTerms:
    total: Tensor
    ce: float
    scl: float | None
    kd: float | None
    fd: float | None

    def as_dict(self) -> dict:
        return {"ce": self.ce, "scl": self.scl, "kd": self.kd, "fd": self.fd, "total": self.total.item()}


def loss_dfil(batch: Batch, student: Model, teacher: Model | None, w: LossWeights,
              is_first_task: bool, params: Sequence[Tensor] | None = None,
              use_scl: bool = True, use_kd: bool = True, use_fd: bool = True) -> LossTerms:
    """Weighted objective: CE + alpha*SCL, plus beta*KD + gamma*FD after task 1.

    Component values are reported unweighted; terms that are switched off or
    do not apply are ``None``. ``params`` are the student's tape-bound
    parameters (constants when omitted).
    """
    if is_first_task and teacher is not None:
        raise ProtocolError("a teacher was supplied for the first task")
    if not is_first_task and teacher is None and (use_kd or use_fd):
        raise ProtocolError("distillation needs a teacher on tasks after the first")
    B = len(batch)
    scale = 1.0 / B if w.mean_reduction else 1.0

    pred = student.forward(batch.inputs, params)
    ce = loss_ce(pred.logits, batch.labels)
    total = ce * scale if scale != 1.0 else ce
    parts = {"ce": ce.item(), "scl": None, "kd": None, "fd": None}

    if use_scl:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SingleClassBatchWarning)
            scl = loss_scl(pred.features, batch.labels, w.scl_temperature)
        parts["scl"] = scl.item()
        if w.alpha:
            total = total + scl * w.alpha

    if not is_first_task and (use_kd or use_fd):
        tpred = teacher.forward(batch.inputs)
        if use_kd:
            kd = loss_kd(tpred.logits, pred.logits, w.kd_temperature)
            parts["kd"] = kd.item()
            factor = w.beta * scale * (w.kd_temperature ** 2 if w.kd_t_squared else 1.0)
            if factor:
                total = total + kd * factor
        if use_fd:
            fd = loss_fd(tpred.features, pred.features)
            parts["fd"] = fd.item()
            if w.gamma:
                total = total + fd * (w.gamma * scale)

    return LossTerms(total=total, **parts)
