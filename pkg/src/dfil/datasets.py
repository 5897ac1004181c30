"""Synthetic real-vs-fake domain streams and CSV ingestion.

Every domain shares one real-class distribution (a Gaussian mixture); each
domain's fake class is that mixture moved by a domain-specific shift and
stretched along some coordinates. Training on one domain's fakes therefore
says little about another's, which is what makes forgetting observable.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np


class GenerationError(ValueError):
    pass


class DataFormatError(ValueError):
    """Malformed CSV content or a dataset that fails validation."""


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    domain: str = ""
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise DataFormatError(f"inputs {self.inputs.shape} do not match {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def validate(self) -> "Dataset":
        bad = set(np.unique(self.labels).tolist()) - {0, 1}
        if bad:
            raise DataFormatError(f"labels must be 0 or 1, found {sorted(bad)}")
        for cls in (0, 1):
            if not np.any(self.labels == cls):
                raise DataFormatError(f"{self.domain or 'dataset'} ({self.split}) has no samples of class {cls}")
        return self

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and self.domain == other.domain and self.split == other.split
                and np.array_equal(self.inputs, other.inputs) and np.array_equal(self.labels, other.labels))


@dataclass
class Task:
    name: str
    train: Dataset
    test: Dataset


@dataclass
class TaskSequence:
    tasks: list[Task]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.tasks:
            raise GenerationError("a task sequence needs at least one task")
        for t in self.tasks:
            t.train.validate()
            t.test.validate()

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tasks]


@dataclass
class DomainSpec:
    name: str
    input_dim: int
    real_means: np.ndarray
    real_scales: np.ndarray
    real_weights: np.ndarray
    fake_shift: np.ndarray
    fake_scale: np.ndarray
    n_train: int = 400
    n_test: int = 200
    seed_offset: int = 0

    def __post_init__(self):
        self.real_means = np.atleast_2d(np.asarray(self.real_means, dtype=np.float64))
        self.real_scales = np.atleast_2d(np.asarray(self.real_scales, dtype=np.float64))
        self.real_weights = np.asarray(self.real_weights, dtype=np.float64)
        self.fake_shift = np.asarray(self.fake_shift, dtype=np.float64)
        self.fake_scale = np.asarray(self.fake_scale, dtype=np.float64)
        d, k = self.input_dim, len(self.real_weights)
        if self.real_means.shape != (k, d) or self.real_scales.shape != (k, d):
            raise GenerationError(f"{self.name}: mixture means/scales must be {k} x {d}")
        if self.fake_shift.shape != (d,) or self.fake_scale.shape != (d,):
            raise GenerationError(f"{self.name}: fake shift/scale must have length {d}")
        if abs(self.real_weights.sum() - 1.0) > 1e-9 or np.any(self.real_weights < 0):
            raise GenerationError(f"{self.name}: mixture weights must be non-negative and sum to 1")
        if np.any(self.real_scales <= 0) or np.any(self.fake_scale <= 0):
            raise GenerationError(f"{self.name}: scales must be positive")
        if self.n_train < 4 or self.n_test < 4:
            raise GenerationError(f"{self.name}: need at least 4 samples per class per split")

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        real, fake = d["real"], d["fake"]
        return cls(name=d["name"], input_dim=d["input_dim"],
                   real_means=real["means"], real_scales=real["scales"], real_weights=real["weights"],
                   fake_shift=fake["shift"], fake_scale=fake["scale"],
                   n_train=d.get("n_train", 400), n_test=d.get("n_test", 200),
                   seed_offset=d.get("seed_offset", 0))

    def to_dict(self) -> dict:
        return {"name": self.name, "input_dim": self.input_dim,
                "real": {"means": self.real_means.tolist(), "scales": self.real_scales.tolist(),
                         "weights": self.real_weights.tolist()},
                "fake": {"shift": self.fake_shift.tolist(), "scale": self.fake_scale.tolist()},
                "n_train": self.n_train, "n_test": self.n_test, "seed_offset": self.seed_offset}


def _sample_mixture(rng, spec: DomainSpec, n: int, fake: bool) -> np.ndarray:
    comp = rng.choice(len(spec.real_weights), size=n, p=spec.real_weights)
    noise = rng.standard_normal((n, spec.input_dim)) * spec.real_scales[comp]
    if fake:
        return spec.real_means[comp] + spec.fake_scale * noise + spec.fake_shift
    return spec.real_means[comp] + noise


def _split(spec: DomainSpec, seed: int, split: str, n_per_class: int) -> Dataset:
    stream = 0 if split == "train" else 1
    real = _sample_mixture(np.random.default_rng([seed, spec.seed_offset, stream, 0]), spec, n_per_class, False)
    fake = _sample_mixture(np.random.default_rng([seed, spec.seed_offset, stream, 1]), spec, n_per_class, True)
    x = np.concatenate([real, fake])
    y = np.concatenate([np.zeros(n_per_class, dtype=np.int64), np.ones(n_per_class, dtype=np.int64)])
    order = np.random.default_rng([seed, spec.seed_offset, stream, 2]).permutation(len(y))
    return Dataset(x[order], y[order], spec.name, split)


def cap_dataset(ds: Dataset, cap: int) -> Dataset:
    """Keep the first cap // 2 samples of each class, preserving row order."""
    per = cap // 2
    if per < 1:
        raise GenerationError(f"few-shot cap {cap} leaves no samples per class")
    keep = np.zeros(len(ds), dtype=bool)
    for cls in (0, 1):
        keep[np.flatnonzero(ds.labels == cls)[:per]] = True
    return Dataset(ds.inputs[keep], ds.labels[keep], ds.domain, ds.split)


def generate_stream(specs: Sequence[DomainSpec], seed: int, few_shot_cap: int | None = None) -> TaskSequence:
    """Sample train/test sets per domain; tasks after the first get at most ``few_shot_cap`` training rows."""
    if not specs:
        raise GenerationError("at least one domain spec is required")
    tasks = []
    for i, spec in enumerate(specs):
        train = _split(spec, seed, "train", spec.n_train)
        if i > 0 and few_shot_cap is not None and few_shot_cap < len(train):
            train = cap_dataset(train, few_shot_cap)
        tasks.append(Task(spec.name, train, _split(spec, seed, "test", spec.n_test)))
    return TaskSequence(tasks, meta={"seed": seed, "few_shot_cap": few_shot_cap})


# -- presets ------------------------------------------------------------------

def load_presets() -> dict:
    return json.loads(resources.files("dfil").joinpath("presets.json").read_text())


def preset(name: str) -> tuple[list[DomainSpec], int | None]:
    presets = load_presets()
    if name not in presets:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(presets))}")
    p = presets[name]
    return [DomainSpec.from_dict(d) for d in p["domains"]], p.get("few_shot_cap")


def preset_stream(name: str, seed: int) -> TaskSequence:
    specs, cap = preset(name)
    seq = generate_stream(specs, seed, cap)
    seq.meta["preset"] = name
    return seq


# -- CSV ------------------------------------------------------------------

def write_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(ds.dim)] + ["label"])
        for x, y in zip(ds.inputs, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_csv(path, domain: str | None = None, split: str = "train") -> Dataset:
    """Read ``x0,...,x{d-1},label`` rows; errors name the offending line."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        d = len(header) - 1
        if d < 1 or header != [f"x{j}" for j in range(d)] + ["label"]:
            raise DataFormatError(f"{path}:1: header must be x0,...,x{{d-1}},label, got {','.join(header)}")
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise DataFormatError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                x = [float(v) for v in row[:d]]
                y = int(row[d])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(x)):
                raise DataFormatError(f"{path}:{lineno}: non-finite feature value")
            if y not in (0, 1):
                raise DataFormatError(f"{path}:{lineno}: label must be 0 or 1, got {y}")
            xs.append(x)
            ys.append(y)
    ds = Dataset(np.array(xs, dtype=np.float64).reshape(len(xs), d), np.array(ys, dtype=np.int64),
                 domain if domain is not None else path.stem, split)
    return ds.validate()


MANIFEST = "manifest.json"


def write_stream(seq: TaskSequence, out_dir, extra: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    entries = []
    for t in seq:
        tr, te = out / f"{t.name}_train.csv", out / f"{t.name}_test.csv"
        write_csv(t.train, tr)
        write_csv(t.test, te)
        written += [tr, te]
        entries.append({"name": t.name, "train": tr.name, "test": te.name,
                        "n_train": len(t.train), "n_test": len(t.test)})
    manifest = {"tasks": entries, **seq.meta, **(extra or {})}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return written


def load_stream(data_dir) -> TaskSequence:
    data_dir = Path(data_dir)
    mpath = data_dir / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"{data_dir}: no {MANIFEST}")
    manifest = json.loads(mpath.read_text())
    tasks = [Task(e["name"],
                  load_csv(data_dir / e["train"], e["name"], "train"),
                  load_csv(data_dir / e["test"], e["name"], "test"))
             for e in manifest["tasks"]]
    meta = {k: v for k, v in manifest.items() if k != "tasks"}
    return TaskSequence(tasks, meta)
