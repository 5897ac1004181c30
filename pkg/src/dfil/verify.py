"""Self-check suites run by ``dfil verify``.

Each check compares a library routine against a slow oracle and reports the
largest discrepancy seen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from . import oracles
from .losses import Batch, LossWeights, loss_ce, loss_dfil, loss_fd, loss_kd, loss_scl
from .metrics import AccuracyMatrix, auc, average_accuracy
from .model import Model
from .numkernel import Tensor, grad_check
from .replay import ScoredSample, Strategy, entropy, select_from_scores

SUITES = ("grad", "losses", "replay", "metrics")

GRAD_TOL = 1e-4
GRAD_EPS = 1e-5


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    observed: float
    threshold: float
    case: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.suite}/{self.name}: observed {self.observed:.3e} (threshold {self.threshold:.1e})"


# -- gradient checks ----------------------------------------------------------------

def small_model(rng: np.random.Generator, d: int = 8) -> Model:
    return Model.build(d, hidden=(6,), feature_dim=4, rng=rng)


def _perturbed(model: Model, rng: np.random.Generator, scale: float = 0.3) -> Model:
    m = model.snapshot()
    for p in m.parameters():
        p += scale * rng.standard_normal(p.shape)
    return m


def param_grad_error(model: Model, objective, eps: float = GRAD_EPS) -> float:
    """Max relative error over all parameters of ``objective(params) -> scalar Tensor``."""
    base = model.constants()
    worst = 0.0
    for k in range(len(base)):
        def f(x, k=k):
            params = list(base)
            params[k] = x
            return objective(params)
        worst = max(worst, grad_check(f, base[k], eps))
    return worst


def loss_objectives(rng: np.random.Generator, B: int = 8, d: int = 8):
    """Random student/teacher/batch and one objective per loss term."""
    student = small_model(rng, d)
    teacher = _perturbed(student, rng)
    # nonzero biases keep pre-activations off the relu kink
    for p in student.parameters():
        p += 0.05 * rng.standard_normal(p.shape)
    x = rng.standard_normal((B, d))
    y = np.array([0, 1] * (B // 2) + [0] * (B % 2))
    rng.shuffle(y)
    t_pred = teacher.forward(x)
    w = LossWeights(alpha=1.0, beta=1.0, gamma=1.0, kd_temperature=2.0, scl_temperature=0.5)
    batch = Batch(x, y)
    objectives = {
        "ce": lambda ps: loss_ce(student.forward(x, ps).logits, y),
        "scl": lambda ps: loss_scl(student.forward(x, ps).features, y, w.scl_temperature),
        "kd": lambda ps: loss_kd(t_pred.logits, student.forward(x, ps).logits, w.kd_temperature),
        "fd": lambda ps: loss_fd(t_pred.features, student.forward(x, ps).features),
        "dfil": lambda ps: loss_dfil(batch, student, teacher, w, False, ps).total,
    }
    return student, objectives


def suite_grad(seeds: int = 20) -> list[Check]:
    worst: dict[str, tuple[float, int]] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        student, objectives = loss_objectives(rng)
        for name, obj in objectives.items():
            err = param_grad_error(student, obj)
            if err >= worst.get(name, (-1.0, 0))[0]:
                worst[name] = (err, seed)
    checks = []
    for name, (err, seed) in worst.items():
        checks.append(Check("grad", f"loss_{name}", err < GRAD_TOL, err, GRAD_TOL, {"seed": seed}))
    rng = np.random.default_rng(123)
    x = Tensor(rng.standard_normal(6))
    err = grad_check(lambda v: nk.sum_(v * v), x, GRAD_EPS)
    checks.append(Check("grad", "sum_of_squares", err < 1e-6, err, 1e-6))
    return checks


# -- loss oracles -------------------------------------------------------------------

def suite_losses() -> list[Check]:
    checks = []
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((4, 5))
    labels = [0, 1, 0, 1]
    for tau in (0.1, 0.5, 1.0):
        got = loss_scl(Tensor(feats), labels, tau).item()
        ref = oracles.scl_term_by_term(feats, labels, tau)
        err = abs(got - ref)
        checks.append(Check("losses", f"scl_term_by_term_tau{tau}", err <= 1e-10, err, 1e-10,
                            {"features": feats.tolist(), "labels": labels, "tau": tau}))

    z = rng.standard_normal((5, 2)) * 3
    got = loss_kd(Tensor(z), Tensor(z), 20.0).item()
    ref = sum(oracles.entropy_direct(oracles.softmax_direct(row, 20.0)) for row in z)
    checks.append(Check("losses", "kd_self_equals_entropy", abs(got - ref) <= 1e-10, abs(got - ref), 1e-10))

    got = loss_kd(Tensor([[2.0, 0.0]]), Tensor([[0.0, 2.0]]), 20.0).item()
    ref = oracles.kd_direct([[2.0, 0.0]], [[0.0, 2.0]], 20.0)
    checks.append(Check("losses", "kd_direct_T20", abs(got - ref) <= 1e-12, abs(got - ref), 1e-12))

    a = Tensor(rng.standard_normal((3, 16)))
    fd = loss_fd(a, a).item()
    checks.append(Check("losses", "fd_identity", fd == 0.0, abs(fd), 0.0))

    B = 6
    ce = loss_ce(Tensor(np.zeros((B, 2))), [0, 1, 0, 1, 1, 0]).item()
    err = abs(ce - B * math.log(2))
    checks.append(Check("losses", "ce_uniform", err <= 1e-12, err, 1e-12))

    logits = rng.standard_normal((3, 2))
    y = [0, 1, 1]
    p0 = [oracles.softmax_direct(r, 1.0)[0] for r in logits]
    err = abs(loss_ce(Tensor(logits), y).item() - oracles.ce_direct(p0, y))
    checks.append(Check("losses", "ce_hand", err <= 1e-12, err, 1e-12))
    return checks


# -- replay oracle ---------------------------------------------------------------------

def random_scores(rng: np.random.Generator, n: int = 40, with_ties: bool = True) -> list[ScoredSample]:
    labels = np.array([0, 1] * (n // 2))
    rng.shuffle(labels)
    h = rng.uniform(0, math.log(2), n)
    d = rng.uniform(0, 3, n)
    if with_ties:
        # copy a handful of scores onto other samples to create exact ties
        for _ in range(n // 4):
            i, j = rng.integers(0, n, 2)
            h[j] = h[i]
            i, j = rng.integers(0, n, 2)
            d[j] = d[i]
    return [ScoredSample(i, int(labels[i]), float(h[i]), float(d[i])) for i in range(n)]


def suite_replay(datasets: int = 10, K: int = 16) -> list[Check]:
    mismatches = 0
    case = {}
    for seed in range(datasets):
        scores = random_scores(np.random.default_rng(seed))
        h = [s.entropy for s in scores]
        d = [s.centroid_distance for s in scores]
        y = [s.label for s in scores]
        for strat in (Strategy.OURS, Strategy.ALL_HARD, Strategy.ALL_EASY, Strategy.ALL_MARGIN, Strategy.ALL_CENTER):
            got = select_from_scores(scores, K, strat)
            ref = oracles.replay_bruteforce(h, d, y, K, strat.value)
            if set(got.indices) != ref or len(got) != K:
                mismatches += 1
                case = {"seed": seed, "strategy": strat.value, "got": sorted(got.indices), "expected": sorted(ref)}
        sel = select_from_scores(scores, K, Strategy.RANDOM, np.random.default_rng(seed))
        balanced = sum(1 for i in sel.indices if y[i] == 0) == K // 2
        if len(set(sel.indices)) != K or not balanced:
            mismatches += 1
            case = {"seed": seed, "strategy": "random", "got": sel.indices}
    checks = [Check("replay", "strategies_vs_full_sort", mismatches == 0, float(mismatches), 0.0, case)]
    for p, expected, tol in (((0.5, 0.5), math.log(2), 1e-12), ((1.0, 0.0), 0.0, 0.0),
                             ((0.9, 0.1), 0.325083, 1e-6)):
        err = abs(entropy(p) - expected)
        checks.append(Check("replay", f"entropy{p}", err <= tol, err, tol))
    return checks


# -- metrics --------------------------------------------------------------------------

def suite_metrics(score_sets: int = 50) -> list[Check]:
    m = AccuracyMatrix(["a", "b", "c", "d"])
    m.set_row(1, [95.53])
    m.set_row(2, [89.40, 79.14])
    m.set_row(3, [69.16, 43.58, 94.69])
    m.set_row(4, [66.34, 62.16, 73.56, 81.13])
    aa = average_accuracy(m, 4)
    checks = [Check("metrics", "aa_table_row_70.79", abs(aa - 70.79) <= 0.01, abs(aa - 70.79), 0.01)]
    worst = 0.0
    for seed in range(score_sets):
        rng = np.random.default_rng(seed)
        n = 20 + seed % 10
        labels = np.array([0, 1] * (n // 2) + [0] * (n % 2))
        scores = np.round(rng.uniform(size=n), 1)  # rounding forces ties
        worst = max(worst, abs(auc(scores, labels) - oracles.auc_trapezoid(scores, labels)))
    checks.append(Check("metrics", "auc_pairwise_vs_trapezoid", worst <= 1e-12, worst, 1e-12))
    sep = auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    checks.append(Check("metrics", "auc_separated", sep == 1.0, abs(sep - 1.0), 0.0))
    return checks


def run_suite(name: str) -> list[Check]:
    names = SUITES if name == "all" else (name,)
    out = []
    for n in names:
        out += {"grad": suite_grad, "losses": suite_losses, "replay": suite_replay, "metrics": suite_metrics}[n]()
    return out
