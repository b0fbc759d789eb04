"""Small numpy classifiers (softmax regression or one-hidden-layer ReLU MLP).

These play both the defender's shadow model and the population of suspect
models. Training is plain mini-batch gradient descent with decoupled weight
decay; gradients are analytic and checked against finite differences in the
test suite.

Checkpoint format (binary)::

    b"TPMLP1\\n"
    {"layer_dims": [...], "init_seed": s}\\n       # one JSON line, UTF-8
    W1, b1, W2, b2, ...                            # float64 little-endian, row-major

``W_i`` has shape (fan_in, fan_out).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from trainprove.errors import NumericalOverflow, SpecMismatch
from trainprove.synth import LabeledDataset

_MAGIC = b"TPMLP1\n"


@dataclass(frozen=True)
class CrossEntropy:
    name = "ce"

    def to_dict(self) -> dict:
        return {"name": "ce"}


@dataclass(frozen=True)
class Focal:
    gamma: float = 2.0
    alpha_balance: float = 0.25
    name = "focal"

    def to_dict(self) -> dict:
        return {"name": "focal", "gamma": self.gamma, "alpha_balance": self.alpha_balance}


LossSpec = Union[CrossEntropy, Focal]


def loss_from_dict(d: dict | str) -> LossSpec:
    if isinstance(d, str):
        d = {"name": d}
    name = d["name"].lower()
    if name in ("ce", "cross_entropy", "crossentropy"):
        return CrossEntropy()
    if name == "focal":
        return Focal(float(d.get("gamma", 2.0)), float(d.get("alpha_balance", 0.25)))
    raise ValueError(f"unknown loss {d['name']!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    weight_decay: float = 0.0
    loss: LossSpec = field(default_factory=CrossEntropy)
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "loss": self.loss.to_dict(),
            "shuffle_seed": self.shuffle_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = loss_from_dict(d["loss"])
        return cls(**d)


@dataclass
class TrainHistory:
    epoch_loss: list[float]
    final_train_accuracy: float


class MlpClassifier:
    """Softmax classifier with zero or one ReLU hidden layer."""

    def __init__(self, layer_dims, params=None, init_seed: int = 0):
        dims = [int(v) for v in layer_dims]
        if len(dims) not in (2, 3) or min(dims) < 1:
            raise ValueError(f"layer_dims must be [d, K] or [d, h, K], got {layer_dims}")
        self.layer_dims = dims
        self.init_seed = int(init_seed)
        if params is None:
            params = self._init_params(dims, self.init_seed)
        self.params = [np.array(p, dtype=np.float64) for p in params]
        expected = self.param_shapes()
        if [p.shape for p in self.params] != expected:
            raise SpecMismatch(f"parameter shapes {[p.shape for p in self.params]} != {expected}")

    @classmethod
    def create(cls, dim: int, num_classes: int, hidden: int = 0, seed: int = 0) -> "MlpClassifier":
        dims = [dim, hidden, num_classes] if hidden else [dim, num_classes]
        return cls(dims, init_seed=seed)

    @staticmethod
    def _init_params(dims, seed):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x1417]))
        params = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            params.append(rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in))
            params.append(np.zeros(fan_out))
        return params

    def param_shapes(self):
        shapes = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def hidden(self) -> int:
        return self.layer_dims[1] if len(self.layer_dims) == 3 else 0

    def copy(self) -> "MlpClassifier":
        return MlpClassifier(self.layer_dims, [p.copy() for p in self.params], self.init_seed)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def _forward(self, x):
        if len(self.params) == 2:
            w, b = self.params
            return x @ w + b, None
        w1, b1, w2, b2 = self.params
        hidden = np.maximum(x @ w1 + b1, 0.0)
        return hidden @ w2 + b2, hidden

    def logits(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise SpecMismatch(f"expected N x {self.input_dim} features, got shape {x.shape}")
        return self._forward(x)[0]

    def __eq__(self, other):
        return (
            isinstance(other, MlpClassifier)
            and self.layer_dims == other.layer_dims
            and all(np.array_equal(a, b) for a, b in zip(self.params, other.params))
        )

    def __repr__(self):
        return f"MlpClassifier(layer_dims={self.layer_dims}, init_seed={self.init_seed})"


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _loss_and_logit_grad(z, y, loss: LossSpec):
    """Mean loss and its gradient w.r.t. the logits."""
    n = z.shape[0]
    logq = _log_softmax(z)
    q = np.exp(logq)
    rows = np.arange(n)
    logp = logq[rows, y]
    coef_grad = q.copy()
    coef_grad[rows, y] -= 1.0  # q - onehot
    if isinstance(loss, CrossEntropy):
        return float(-logp.mean()), coef_grad / n
    gamma, alpha = loss.gamma, loss.alpha_balance
    p = np.exp(logp)
    one_minus = -np.expm1(logp)
    mod = one_minus ** gamma
    per_sample = -alpha * mod * logp
    # d/dz_j FL = alpha * [(1-p)^g - g (1-p)^(g-1) p log p] * (q_j - onehot_j)
    if gamma == 0.0:
        scale = alpha * np.ones(n)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod = np.where(one_minus > 0, gamma * one_minus ** (gamma - 1.0) * p * logp, 0.0)
        scale = alpha * (mod - dmod)
    return float(per_sample.mean()), coef_grad * (scale[:, None] / n)


def loss_and_grad(model: MlpClassifier, features, labels, loss: LossSpec = CrossEntropy()):
    """Batch-mean loss and exact gradients, one array per parameter."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError("labels out of range")
    return _loss_and_grad(model, x, y, loss)


def _loss_and_grad(model, x, y, loss):
    z, hidden = model._forward(x)
    value, dz = _loss_and_logit_grad(z, y, loss)
    if not math.isfinite(value):
        raise NumericalOverflow("non-finite loss")
    if hidden is None:
        return value, [x.T @ dz, dz.sum(axis=0)]
    w2 = model.params[2]
    dh = dz @ w2.T
    dh[hidden <= 0.0] = 0.0
    return value, [x.T @ dh, dh.sum(axis=0), hidden.T @ dz, dz.sum(axis=0)]


# ---------------------------------------------------------------------------
# training / prediction
# ---------------------------------------------------------------------------


def train(model: MlpClassifier, data: LabeledDataset, config: TrainConfig):
    """Return a trained copy of ``model`` and its :class:`TrainHistory`."""
    if data.dim != model.input_dim:
        raise SpecMismatch(f"data dim {data.dim} != model input dim {model.input_dim}")
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = model.copy()
    x, y = data.features, data.labels
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError("labels out of range")
    n = len(data)
    lr, decay = config.learning_rate, 1.0 - config.learning_rate * config.weight_decay
    rng = np.random.default_rng(np.random.SeedSequence([config.shuffle_seed & 0xFFFFFFFF, 0x7124]))
    history = []
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            history.append(_run_epoch(model, x, y, n, rng, config, lr, decay, epoch))
    return model, TrainHistory(history, dataset_accuracy(model, data))


def _run_epoch(model, x, y, n, rng, config, lr, decay, epoch) -> float:
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        try:
            value, grads = _loss_and_grad(model, x[idx], y[idx], config.loss)
        except NumericalOverflow as exc:
            raise NumericalOverflow(f"epoch {epoch}: {exc}", epoch=epoch) from exc
        total += value * idx.size
        for p, g in zip(model.params, grads):
            if decay != 1.0:
                p *= decay
            p -= lr * g
    if not all(np.all(np.isfinite(p)) for p in model.params):
        raise NumericalOverflow(f"epoch {epoch}: parameters became non-finite", epoch=epoch)
    return total / n


def predict_logits(model: MlpClassifier, features) -> np.ndarray:
    return model.logits(features)


def predict_labels(model: MlpClassifier, features) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index.
    return np.argmax(model.logits(features), axis=1).astype(np.int64)


def dataset_accuracy(model: MlpClassifier, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict_labels(model, data.features) == data.labels))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def dump_checkpoint(model: MlpClassifier) -> bytes:
    header = json.dumps({"layer_dims": model.layer_dims, "init_seed": model.init_seed})
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params)
    return _MAGIC + header.encode("utf-8") + b"\n" + body


def parse_checkpoint(blob: bytes) -> MlpClassifier:
    if not blob.startswith(_MAGIC):
        raise ValueError("not a model checkpoint")
    rest = blob[len(_MAGIC):]
    nl = rest.index(b"\n")
    meta = json.loads(rest[:nl].decode("utf-8"))
    body = rest[nl + 1:]
    shell = MlpClassifier(meta["layer_dims"], init_seed=meta["init_seed"])
    params, offset = [], 0
    for shape in shell.param_shapes():
        count = int(np.prod(shape))
        chunk = np.frombuffer(body, dtype="<f8", count=count, offset=offset)
        params.append(chunk.reshape(shape).astype(np.float64))
        offset += 8 * count
    if offset != len(body):
        raise ValueError("checkpoint body has trailing bytes")
    return MlpClassifier(meta["layer_dims"], params, meta["init_seed"])


def save_checkpoint(model: MlpClassifier, path) -> None:
    Path(path).write_bytes(dump_checkpoint(model))


def load_checkpoint(path) -> MlpClassifier:
    return parse_checkpoint(Path(path).read_bytes())
