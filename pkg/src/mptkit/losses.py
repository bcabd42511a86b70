"""Training objectives: margin-calibrated cross-entropy, focal distillation, and their sum.

Every function returns ``(value, grad)`` where ``grad`` is the derivative of
``value`` with respect to the student logits passed in.  Batch losses are batch
means, so their gradients already carry the ``1/N`` factor.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mathcore import ContractError, log_softmax, softmax


@dataclass(frozen=True)
class ClassPartition:
    old_classes: tuple[int, ...]
    new_classes: tuple[int, ...]

    def __post_init__(self):
        old = tuple(int(c) for c in self.old_classes)
        new = tuple(int(c) for c in self.new_classes)
        object.__setattr__(self, "old_classes", old)
        object.__setattr__(self, "new_classes", new)
        if set(old) & set(new):
            raise ContractError("old and new class sets overlap")
        if len(set(old)) != len(old) or len(set(new)) != len(new):
            raise ContractError("class sets contain duplicates")
        if sorted(old + new) != list(range(len(old) + len(new))):
            raise ContractError("old and new classes must cover 0..C-1 exactly")
        if not old:
            raise ContractError("old class set is empty")

    @property
    def class_count(self) -> int:
        return len(self.old_classes) + len(self.new_classes)

    def is_old(self, labels) -> np.ndarray:
        return np.isin(np.asarray(labels), self.old_classes)


@dataclass(frozen=True)
class MarginBias:
    k: float
    partition: ClassPartition

    def __post_init__(self):
        if self.k < 0:
            raise ContractError(f"margin bias k must be non-negative, got {self.k}")

    def vector(self) -> np.ndarray:
        delta = np.zeros(self.partition.class_count)
        delta[list(self.partition.new_classes)] = self.k
        return delta


@dataclass(frozen=True)
class FocalDistillationConfig:
    alpha: float = 1.0
    beta: float = 5.0
    distance: str = "KL"
    temperature: float = 1.0

    def __post_init__(self):
        if self.distance not in ("KL", "LM"):
            raise ContractError(f"distance must be 'KL' or 'LM', got {self.distance!r}")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ContractError("alpha, beta must be non-negative with alpha + beta > 0")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")


@dataclass(frozen=True)
class MptObjectiveConfig:
    margin_bias: MarginBias
    lam: float
    focal: FocalDistillationConfig

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ContractError(f"logit shapes differ: {a.shape} vs {b.shape}")


def margin_calibrated_ce(logits, label: int, bias: MarginBias) -> tuple[float, np.ndarray]:
    """``-log softmax(z + delta)[label]`` for a single logit row."""
    z = np.asarray(logits, dtype=np.float64)
    delta = bias.vector()
    if z.shape != delta.shape:
        raise ContractError(f"logit length {z.shape[0]} != class count {delta.shape[0]}")
    if not 0 <= label < z.shape[0]:
        raise ContractError(f"label {label} out of range for {z.shape[0]} classes")
    shifted = z + delta
    loss = -log_softmax(shifted)[label]
    grad = softmax(shifted)
    grad[label] -= 1.0
    return float(loss), grad


def margin_calibrated_ce_batch(logits, labels, bias: MarginBias) -> tuple[float, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, c = z.shape
    delta = bias.vector()
    if c != delta.shape[0]:
        raise ContractError(f"logit width {c} != class count {delta.shape[0]}")
    if n == 0 or y.shape != (n,):
        raise ContractError("labels must be a non-empty vector matching the batch")
    if np.any(y < 0) or np.any(y >= c):
        raise ContractError("label out of range")
    shifted = z + delta
    rows = np.arange(n)
    loss = -log_softmax(shifted, axis=1)[rows, y].mean()
    grad = softmax(shifted, axis=1)
    grad[rows, y] -= 1.0
    return float(loss), grad / n


def distance_kl(z_student, z_reference, temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``KL(softmax(zs/t) || softmax(zr/t))`` and its gradient w.r.t. ``zs``.

    Accepts single rows or batches; returns per-row values.
    """
    zs = np.asarray(z_student, dtype=np.float64)
    zr = np.asarray(z_reference, dtype=np.float64)
    _check_pair(zs, zr)
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    log_p = log_softmax(zs / temperature, axis=-1)
    log_q = log_softmax(zr / temperature, axis=-1)
    p = np.exp(log_p)
    diff = log_p - log_q
    kl = np.sum(p * diff, axis=-1)
    grad = p * (diff - kl[..., None]) / temperature
    return np.maximum(kl, 0.0), grad


def distance_lm(z_student, z_reference) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``0.5 * ||zs - zr||^2`` and its gradient w.r.t. ``zs``."""
    zs = np.asarray(z_student, dtype=np.float64)
    zr = np.asarray(z_reference, dtype=np.float64)
    _check_pair(zs, zr)
    d = zs - zr
    return 0.5 * np.sum(d * d, axis=-1), d


def focal_distillation(
    student_logits,
    reference_logits,
    reference_preds,
    labels,
    cfg: FocalDistillationConfig,
    reference_classes: Sequence[int] | None = None,
) -> tuple[float, np.ndarray]:
    """Batch-mean focal distillation of the student towards a frozen reference.

    ``reference_classes`` lists the student columns the reference model covers
    (in the reference's own column order); ``None`` means all of them.  Student
    logits are sliced to those columns before measuring the distance.
    ``reference_preds`` and ``labels`` are both in the student's label space.
    """
    zs = np.asarray(student_logits, dtype=np.float64)
    zr = np.asarray(reference_logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    yhat = np.asarray(reference_preds, dtype=np.int64)
    n = zs.shape[0]
    if n == 0:
        raise ContractError("focal distillation needs a non-empty batch")
    if zr.shape[0] != n or y.shape != (n,) or yhat.shape != (n,):
        raise ContractError("student, reference, predictions and labels must share the batch size")
    cols = np.arange(zs.shape[1]) if reference_classes is None else np.asarray(reference_classes, dtype=np.int64)
    sliced = zs[:, cols]
    if cfg.distance == "KL":
        dist, dgrad = distance_kl(sliced, zr, cfg.temperature)
    else:
        dist, dgrad = distance_lm(sliced, zr)
    weights = cfg.alpha + cfg.beta * (yhat == y)
    loss = float(np.mean(weights * dist))
    grad = np.zeros_like(zs)
    grad[:, cols] = weights[:, None] * dgrad / n
    return loss, grad


@dataclass
class ReferenceOutputs:
    """Frozen-model logits on a batch plus the columns of the student they cover."""

    logits: np.ndarray
    preds: np.ndarray  # argmax, mapped to the student's label space
    classes: tuple[int, ...] | None = None


def mpt_objective(
    student_logits,
    labels,
    old: ReferenceOutputs | None,
    new: ReferenceOutputs | None,
    cfg: MptObjectiveConfig,
) -> tuple[float, np.ndarray, dict[str, float]]:
    """``L_delta + lam*FD(student, old) + lam*FD(student, new)``.

    Either reference may be ``None`` to drop its term (PCT uses ``new=None``).
    Returns ``(total, grad, terms)`` where ``terms`` holds each unweighted part.
    """
    zs = np.asarray(student_logits, dtype=np.float64)
    part = cfg.margin_bias.partition
    if zs.ndim != 2 or zs.shape[1] != part.class_count:
        raise ContractError(f"student logits must have {part.class_count} columns")
    ce, grad = margin_calibrated_ce_batch(zs, labels, cfg.margin_bias)
    terms = {"ce": ce, "fd_old": 0.0, "fd_new": 0.0}
    total = ce
    if cfg.lam > 0:
        if old is not None:
            classes = part.old_classes if old.classes is None else old.classes
            if tuple(classes) != part.old_classes or old.logits.shape[1] != len(part.old_classes):
                raise ContractError("old-model logits must cover exactly the old classes")
            fd, g = focal_distillation(zs, old.logits, old.preds, labels, cfg.focal, classes)
            terms["fd_old"] = fd
            total = total + cfg.lam * fd
            grad = grad + cfg.lam * g
        if new is not None:
            if new.logits.shape[1] != part.class_count:
                raise ContractError("reference-model logits must cover all classes")
            fd, g = focal_distillation(zs, new.logits, new.preds, labels, cfg.focal, new.classes)
            terms["fd_new"] = fd
            total = total + cfg.lam * fd
            grad = grad + cfg.lam * g
    terms["total"] = total
    return total, grad, terms
