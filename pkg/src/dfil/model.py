"""Encoder + linear classifier detection model with teacher snapshots.

The model holds its parameters as plain float64 arrays. Forward passes can
run either on constants (inference) or on tensors watched by a
:class:`~dfil.numkernel.GradTape` (training), see :meth:`Model.bind`.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .numkernel import DimensionError, GradTape, Tensor

NUM_CLASSES = 2
ACTIVATIONS = ("relu", "linear")
_MAGIC = b"DFIL"


@dataclass(frozen=True)
class Prediction:
    """Model outputs for one sample, or a batch when the tensors are 2-D."""

    features: Tensor
    logits: Tensor
    probs: Tensor


class Model:
    """f(x) = stack of dense layers; g(r) = linear classifier to 2 logits.

    ``layers`` is a list of ``(weight[in, out], bias[out], activation)``;
    the classifier is ``(weight[feature_dim, 2], bias[2])``.
    """

    def __init__(self, layers, classifier, seed: int | None = None):
        self.layers = [(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64), act)
                       for w, b, act in layers]
        cw, cb = classifier
        self.classifier = (np.array(cw, dtype=np.float64), np.array(cb, dtype=np.float64))
        self.seed = seed
        self._validate()

    @classmethod
    def build(cls, input_dim: int, hidden=(64, 32), feature_dim: int = 16, seed: int = 0,
              rng: np.random.Generator | None = None) -> "Model":
        """Glorot-uniform weights, zero biases; ReLU hidden layers, linear projection."""
        rng = rng if rng is not None else np.random.default_rng(seed)
        dims = [input_dim, *hidden, feature_dim]
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            act = "linear" if i == len(dims) - 2 else "relu"
            layers.append((_glorot(rng, fan_in, fan_out), np.zeros(fan_out), act))
        classifier = (_glorot(rng, feature_dim, NUM_CLASSES), np.zeros(NUM_CLASSES))
        return cls(layers, classifier, seed=seed)

    def _validate(self) -> None:
        prev = None
        for i, (w, b, act) in enumerate(self.layers):
            if act not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {list(w.shape)} and bias {list(b.shape)} disagree")
            if prev is not None and w.shape[0] != prev:
                raise DimensionError(f"layer {i}: expects {w.shape[0]} inputs, previous layer gives {prev}")
            prev = w.shape[1]
        cw, cb = self.classifier
        if cw.shape != (self.feature_dim, NUM_CLASSES) or cb.shape != (NUM_CLASSES,):
            raise DimensionError(f"classifier weight {list(cw.shape)} does not map {self.feature_dim} -> {NUM_CLASSES}")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0] if self.layers else self.classifier[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1][0].shape[1] if self.layers else self.classifier[0].shape[0]

    # -- parameters -----------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        """Live parameter arrays in a fixed order (encoder layers, then classifier)."""
        out = []
        for w, b, _ in self.layers:
            out += [w, b]
        out += list(self.classifier)
        return out

    def bind(self, tape: GradTape) -> list[Tensor]:
        """Watch every parameter on ``tape``; pass the result to the forward calls."""
        return [tape.watch(p) for p in self.parameters()]

    def constants(self) -> list[Tensor]:
        return [Tensor(p) for p in self.parameters()]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def snapshot(self) -> "Model":
        return copy.deepcopy(self)

    # -- forward --------------------------------------------------------

    def encode(self, x, params: list[Tensor] | None = None) -> Tensor:
        params = params if params is not None else self.constants()
        h = nk.constant(x)
        for i, (_, _, act) in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if h.shape[-1] != w.shape[0]:
                raise DimensionError(f"layer {i}: input has {h.shape[-1]} features, layer expects {w.shape[0]}")
            h = nk.matmul(h, w) + b
            if act == "relu":
                h = nk.relu(h)
        return h

    def classify(self, features: Tensor, params: list[Tensor] | None = None) -> Tensor:
        params = params if params is not None else self.constants()
        w, b = params[-2], params[-1]
        return nk.matmul(features, w) + b

    def forward(self, x, params: list[Tensor] | None = None) -> Prediction:
        """Return features r = f(x), logits z = g(r), probs p = softmax(z)."""
        params = params if params is not None else self.constants()
        r = self.encode(x, params)
        z = self.classify(r, params)
        return Prediction(r, z, nk.softmax(z, 1.0))

    def predict_proba(self, inputs) -> np.ndarray:
        return self.forward(np.atleast_2d(np.asarray(inputs, dtype=np.float64))).probs.numpy()

    def predict(self, inputs) -> np.ndarray:
        """Argmax class per row; an exact 0.5/0.5 tie goes to class 0 (real)."""
        p = self.predict_proba(inputs)
        return (p[:, 1] > p[:, 0]).astype(np.int64)

    # -- checkpoints ----------------------------------------------------

    def save(self, path) -> None:
        params = self.parameters()
        header = {
            "format": 1,
            "layers": [{"shape": list(w.shape), "activation": act} for w, _, act in self.layers],
            "classifier": list(self.classifier[0].shape),
            "seed": self.seed,
            "params": [list(p.shape) for p in params],
            "dtype": "<f8",
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params)
        Path(path).write_bytes(_MAGIC + struct.pack("<I", len(head)) + head + blob)

    @classmethod
    def load(cls, path) -> "Model":
        raw = Path(path).read_bytes()
        if raw[:4] != _MAGIC:
            raise ValueError(f"{path}: not a .dfil checkpoint")
        (n,) = struct.unpack("<I", raw[4:8])
        header = json.loads(raw[8:8 + n].decode("utf-8"))
        offset = 8 + n
        arrays = []
        for shape in header["params"]:
            count = int(np.prod(shape))
            arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64))
            offset += 8 * count
        if offset != len(raw):
            raise ValueError(f"{path}: parameter blob length does not match header")
        layers = [(arrays[2 * i], arrays[2 * i + 1], spec["activation"])
                  for i, spec in enumerate(header["layers"])]
        return cls(layers, (arrays[-2], arrays[-1]), seed=header.get("seed"))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def forward(model: Model, x) -> Prediction:
    return model.forward(x)


def snapshot(model: Model) -> Model:
    return model.snapshot()
