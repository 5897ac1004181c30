"""Incremental training loop, baselines, and a plain Adam optimizer."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .datasets import Dataset, TaskSequence
from .losses import Batch, LossWeights, loss_dfil
from .metrics import AccuracyMatrix, acc, summary
from .model import Model
from .numkernel import GradTape, NumericError
from .replay import ReplayEntry, ReplaySet, Strategy, select_replay, write_audit_csv

log = logging.getLogger(__name__)

METHODS = ("dfil", "finetune", "offline", "er", "lwf")
METHOD_ALIASES = {"ft": "finetune", "ol": "offline"}


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """A loss or gradient went non-finite; carries where it happened."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    method: str = "dfil"
    epochs_per_task: int = 20
    batch_size: int = 32
    learning_rate: float = 5e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    carry_optimizer_state: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    K: int = 40
    replay_strategy: str = "ours"
    use_replay: bool = True
    hidden: tuple[int, ...] = (64, 32)
    feature_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        self.method = METHOD_ALIASES.get(self.method, self.method)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.hidden = tuple(self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}, got {self.method!r}")
        if self.epochs_per_task < 1:
            raise ConfigError("epochs_per_task must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (contrastive loss needs pairs)")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.lr_decay_every < 1 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1] and lr_decay_every >= 1")
        if self.K <= 0 or self.K % 4:
            raise ConfigError(f"K must be a positive multiple of 4, got {self.K}")
        try:
            Strategy(self.replay_strategy)
        except ValueError:
            raise ConfigError(f"unknown replay strategy {self.replay_strategy!r}") from None

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based epoch ``epoch`` within a task."""
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


# -- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for g in grads:
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


# -- run record ----------------------------------------------------------------

LOSS_COLUMNS = ["task", "epoch", "batch", "ce", "scl", "kd", "fd", "total"]


@dataclass
class RunRecord:
    config: TrainConfig
    task_names: list[str]
    matrix: AccuracyMatrix
    losses: list[dict] = field(default_factory=list)
    replay: dict[int, list[ReplayEntry]] = field(default_factory=dict)
    replay_sizes: list[int] = field(default_factory=list)
    checkpoints: dict[int, Model] = field(default_factory=dict)

    def epoch_losses(self, task: int) -> list[float]:
        """Mean total loss per epoch for ``task``."""
        by_epoch: dict[int, list[float]] = {}
        for row in self.losses:
            if row["task"] == task:
                by_epoch.setdefault(row["epoch"], []).append(row["total"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def summary(self) -> list[dict]:
        return summary(self.matrix)

    def final(self) -> tuple[float, float | None]:
        """(AA, AF) after the last recorded task."""
        s = self.summary()[-1]
        return s["AA"], s["AF"]

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
        self.matrix.to_csv(out / "accuracy_matrix.csv")
        with open(out / "losses.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOSS_COLUMNS)
            for row in self.losses:
                w.writerow([_fmt(row[c]) for c in LOSS_COLUMNS])
        for i, entries in sorted(self.replay.items()):
            write_audit_csv(out / f"replay_task{i}.csv", entries)
        for i, model in sorted(self.checkpoints.items()):
            model.save(out / f"model_task{i}.dfil")
        doc = {"tasks": self.task_names, "method": self.config.method,
               "replay_sizes": self.replay_sizes, "boundaries": self.summary()}
        (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- training -------------------------------------------------------------------

BatchHook = Callable[[int, int, int, Model, "Model | None"], None]


def make_batches(order: np.ndarray, labels: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Cut ``order`` into batches; a trailing batch that is a singleton or single-class joins the previous one."""
    batches = [order[k:k + batch_size] for k in range(0, len(order), batch_size)]
    if len(batches) > 1:
        last = batches[-1]
        if len(last) < 2 or len(np.unique(labels[last])) < 2:
            batches[-2] = np.concatenate([batches[-2], last])
            batches.pop()
    return batches


def evaluate(model: Model, ds: Dataset) -> float:
    return acc(model.predict(ds.inputs), ds.labels)


class _Phase:
    """Trains one model on one dataset for ``epochs_per_task`` epochs."""

    def __init__(self, cfg: TrainConfig, shuffle_rng: np.random.Generator, record: RunRecord,
                 hook: BatchHook | None):
        self.cfg = cfg
        self.rng = shuffle_rng
        self.record = record
        self.hook = hook
        self.state: AdamState | None = None

    def run(self, model: Model, X: np.ndarray, Y: np.ndarray, task: int, teacher: Model | None,
            is_first: bool, use_scl: bool, use_kd: bool, use_fd: bool) -> None:
        cfg = self.cfg
        if self.state is None or not cfg.carry_optimizer_state:
            self.state = AdamState.fresh(model.parameters())
        for epoch in range(cfg.epochs_per_task):
            lr = cfg.lr_at(epoch)
            order = self.rng.permutation(len(Y))
            for b, idx in enumerate(make_batches(order, Y, cfg.batch_size)):
                if self.hook is not None:
                    self.hook(task, epoch, b, model, teacher)
                tape = GradTape()
                params = model.bind(tape)
                # overflow surfaces as NumericError from the kernel, not as a numpy warning
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        terms = loss_dfil(Batch(X[idx], Y[idx]), model, teacher, cfg.weights, is_first,
                                          params, use_scl=use_scl, use_kd=use_kd, use_fd=use_fd)
                        grads = tape.gradient(terms.total, params)
                    adam_step(model.parameters(), grads, self.state, lr,
                              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
                except NumericError as exc:
                    diag = {"task": task, "epoch": epoch, "batch": b, "error": str(exc)}
                    raise TrainingAborted(f"non-finite value at task {task}, epoch {epoch}, batch {b}: {exc}",
                                          diag) from exc
                row = terms.as_dict()
                self.record.losses.append({"task": task, "epoch": epoch, "batch": b, **row})
            log.debug("task %d epoch %d lr %.2e", task, epoch, lr)


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    init, shuffle, replay = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(shuffle), np.random.default_rng(replay)


def _new_model(seq: TaskSequence, cfg: TrainConfig, rng) -> Model:
    return Model.build(seq[0].train.dim, cfg.hidden, cfg.feature_dim, seed=cfg.seed, rng=rng)


def run_incremental(seq: TaskSequence, cfg: TrainConfig, *, use_scl: bool, use_kd: bool, use_fd: bool,
                    replay_strategy: str | None, hook: BatchHook | None = None) -> RunRecord:
    """Task-by-task training with optional replay and distillation.

    For each task: train on its data plus the replay set, select this task's
    replay samples with the freshly trained model, evaluate on all tasks
    seen so far, then freeze a copy as the next task's teacher.
    """
    init_rng, shuffle_rng, replay_rng = _rngs(cfg.seed)
    model = _new_model(seq, cfg, init_rng)
    record = RunRecord(cfg, seq.names, AccuracyMatrix(seq.names))
    replay = ReplaySet()
    teacher: Model | None = None
    phase = _Phase(cfg, shuffle_rng, record, hook)
    for i, task in enumerate(seq, start=1):
        X, Y = task.train.inputs, task.train.labels
        if len(replay):
            RX, RY = replay.arrays()
            X, Y = np.concatenate([X, RX]), np.concatenate([Y, RY])
        is_first = i == 1
        phase.run(model, X, Y, i, None if is_first else teacher, is_first, use_scl,
                  use_kd and not is_first, use_fd and not is_first)
        if replay_strategy is not None:
            sel = select_replay(model, task.train.inputs, task.train.labels, cfg.K, replay_strategy, replay_rng)
            record.replay[i] = replay.add(i, task.train.inputs, sel)
        record.replay_sizes.append(len(replay))
        record.matrix.set_row(i, [evaluate(model, seq[j].test) for j in range(i)])
        record.checkpoints[i] = model.snapshot()
        if use_kd or use_fd:
            teacher = model.snapshot()
        log.info("%s after %s: %s", cfg.method, task.name, record.matrix.row(i))
    return record


def run_dfil(seq: TaskSequence, cfg: TrainConfig, hook: BatchHook | None = None) -> RunRecord:
    if cfg.method != "dfil":
        raise ConfigError(f"run_dfil needs method 'dfil', got {cfg.method!r}")
    strategy = cfg.replay_strategy if cfg.use_replay else None
    return run_incremental(seq, cfg, use_scl=True, use_kd=True, use_fd=True, replay_strategy=strategy, hook=hook)


def run_offline(seq: TaskSequence, cfg: TrainConfig, hook: BatchHook | None = None) -> RunRecord:
    """Joint training on the union of all tasks; only the final accuracy row exists."""
    init_rng, shuffle_rng, _ = _rngs(cfg.seed)
    model = _new_model(seq, cfg, init_rng)
    record = RunRecord(cfg, seq.names, AccuracyMatrix(seq.names))
    X = np.concatenate([t.train.inputs for t in seq])
    Y = np.concatenate([t.train.labels for t in seq])
    _Phase(cfg, shuffle_rng, record, hook).run(model, X, Y, 1, None, True, False, False, False)
    n = len(seq)
    record.matrix.set_row(n, [evaluate(model, t.test) for t in seq])
    record.checkpoints[n] = model.snapshot()
    return record


def run_baseline(seq: TaskSequence, cfg: TrainConfig, hook: BatchHook | None = None) -> RunRecord:
    m = cfg.method
    if m == "finetune":
        return run_incremental(seq, cfg, use_scl=False, use_kd=False, use_fd=False, replay_strategy=None, hook=hook)
    if m == "er":
        return run_incremental(seq, cfg, use_scl=False, use_kd=False, use_fd=False,
                               replay_strategy=Strategy.RANDOM.value, hook=hook)
    if m == "lwf":
        return run_incremental(seq, cfg, use_scl=False, use_kd=True, use_fd=False, replay_strategy=None, hook=hook)
    if m == "offline":
        return run_offline(seq, cfg, hook)
    raise ConfigError(f"{m!r} is not a baseline method")


def run(seq: TaskSequence, cfg: TrainConfig, hook: BatchHook | None = None) -> RunRecord:
    return run_dfil(seq, cfg, hook) if cfg.method == "dfil" else run_baseline(seq, cfg, hook)
