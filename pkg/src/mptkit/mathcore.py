"""Dense float64 feed-forward classifier, reverse-mode gradients, SGD with momentum.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, row-major, one
sample per row.  Layout of an :class:`MlpModel`::

    input -> [affine -> relu] * len(hidden) -> affine (embedding) -> affine (logits)

The embedding layer has no rectifier so a 2-D embedding can occupy the whole
plane; the logit head is affine in the embedding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ContractError(ValueError):
    """An operation was called with arguments that violate its preconditions."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient becomes non-finite during training."""


def as_matrix(values, *, name: str = "matrix") -> np.ndarray:
    """Coerce ``values`` into a finite 2-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


@dataclass
class ArchSpec:
    input_dim: int
    hidden: tuple[int, ...]
    embedding_dim: int
    class_count: int

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        dims = (self.input_dim, *self.hidden, self.embedding_dim, self.class_count)
        if any(d < 1 for d in dims):
            raise ContractError(f"all layer widths must be positive, got {dims}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.embedding_dim, self.class_count)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "embedding_dim": self.embedding_dim,
            "class_count": self.class_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden"]), int(d["embedding_dim"]), int(d["class_count"]))


@dataclass
class ForwardCache:
    """Activations kept by :func:`forward` for the matching :func:`backward` call."""

    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation output of each layer
    model_id: int
    version: int


@dataclass
class MlpModel:
    arch: ArchSpec
    weights: list[np.ndarray]  # layer i: (in_i, out_i)
    biases: list[np.ndarray]  # layer i: (out_i,)
    _version: int = field(default=0, repr=False, compare=False)

    def __post_init__(self):
        widths = self.arch.widths
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(self.weights):
            raise ContractError("layer count does not match architecture")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise ContractError(
                    f"layer {i}: expected weight {(widths[i], widths[i + 1])} and bias {(widths[i + 1],)}, "
                    f"got {w.shape} and {b.shape}"
                )

    @classmethod
    def init(cls, arch: ArchSpec, seed: int | np.random.SeedSequence) -> "MlpModel":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        rng = np.random.default_rng(seed)
        widths = arch.widths
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(arch, weights, biases)

    @property
    def class_count(self) -> int:
        return self.arch.class_count

    @property
    def embedding_dim(self) -> int:
        return self.arch.embedding_dim

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        """Parameter tensors in canonical order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def touch(self) -> None:
        """Mark parameters as changed so cached activations become stale."""
        self._version += 1


def _has_relu(model: MlpModel, layer: int) -> bool:
    # rectifier after hidden layers only; embedding and logit layers stay affine
    return layer < model.n_layers - 2


def forward(model: MlpModel, batch) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Return ``(embeddings, logits, cache)`` for a batch of input rows."""
    x = as_matrix(batch, name="batch")
    if x.shape[1] != model.arch.input_dim:
        raise ContractError(f"batch has {x.shape[1]} columns, model expects {model.arch.input_dim}")
    inputs, pre = [], []
    h = x
    embeddings = x
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        a = h @ w + b
        pre.append(a)
        h = np.maximum(a, 0.0) if _has_relu(model, i) else a
        if i == model.n_layers - 2:
            embeddings = h
    cache = ForwardCache(inputs, pre, id(model), model._version)
    return embeddings, h, cache


def predict_logits(model: MlpModel, batch) -> np.ndarray:
    return forward(model, batch)[1]


def backward(model: MlpModel, cache: ForwardCache | None, logit_gradient) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dLoss/dlogits.

    Returned in the order of :meth:`MlpModel.params`.
    """
    if cache is None or cache.model_id != id(model) or cache.version != model._version:
        raise ContractError("forward cache is missing or stale for this model")
    g = np.asarray(logit_gradient, dtype=np.float64)
    if g.shape != cache.pre[-1].shape:
        raise ContractError(f"logit gradient shape {g.shape} != logits shape {cache.pre[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * model.n_layers)  # type: ignore[list-item]
    for i in reversed(range(model.n_layers)):
        if _has_relu(model, i):
            g = g * (cache.pre[i] > 0.0)
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = g @ model.weights[i].T
    return grads


@dataclass
class OptimizerState:
    momentum: float
    base_lr: float
    buffers: list[np.ndarray]

    @classmethod
    def for_model(cls, model: MlpModel, momentum: float = 0.9, base_lr: float = 0.1) -> "OptimizerState":
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {momentum}")
        if base_lr <= 0:
            raise ContractError(f"base learning rate must be positive, got {base_lr}")
        return cls(momentum, base_lr, [np.zeros_like(p) for p in model.params()])


def sgd_step(model: MlpModel, grads: list[np.ndarray], state: OptimizerState, lr: float) -> None:
    """Classical momentum, in place: ``buf = m*buf + g; p -= lr*buf``."""
    params = model.params()
    if len(grads) != len(params) or len(state.buffers) != len(params):
        raise ContractError("gradient/buffer count does not match parameter count")
    for p, g, buf in zip(params, grads, state.buffers):
        if g.shape != p.shape or buf.shape != p.shape:
            raise ContractError(f"shape mismatch: param {p.shape}, grad {g.shape}, buffer {buf.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient encountered; aborting training")
    for p, g, buf in zip(params, grads, state.buffers):
        buf *= state.momentum
        buf += g
        p -= lr * buf
    model.touch()


@dataclass(frozen=True)
class LrSchedule:
    kind: str  # "cosine" or "constant"
    total_epochs: int
    base_lr: float

    def __post_init__(self):
        if self.kind not in ("cosine", "constant"):
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0:
            raise ContractError("base_lr must be positive")
        if self.total_epochs < 0:
            raise ContractError("total_epochs must be non-negative")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if schedule.kind == "constant":
        return schedule.base_lr
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / schedule.total_epochs))
