"""Prediction rule, flip taxonomy, error rates and logit margins."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .mathcore import ContractError


class UndefinedMetric(ValueError):
    """A metric has no value for this input (empty subset, zero denominator)."""


class Outcome(str, Enum):
    CONSISTENT_CORRECT = "ConsistentCorrect"
    CONSISTENT_WRONG = "ConsistentWrong"
    POSITIVE_FLIP = "PositiveFlip"
    NEGATIVE_FLIP = "NegativeFlip"


@dataclass(frozen=True)
class FlipRecord:
    sample_id: int
    label: int
    old_pred: int
    new_pred: int
    outcome: Outcome


def predict(logits) -> np.ndarray | int:
    """Argmax over the last axis; ties go to the lowest class index."""
    z = np.asarray(logits)
    if z.shape[-1] == 0:
        raise ContractError("cannot predict from an empty logit row")
    # np.argmax returns the first maximal index
    out = np.argmax(z, axis=-1)
    return int(out) if z.ndim == 1 else out


def logit_margin(logits, label) -> np.ndarray | float:
    """``z_y - max_{j != y} z_j``, row-wise when given a batch."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z.reshape(1, -1) if single else z
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if z2.shape[1] < 2:
        raise ContractError("logit margin needs at least two classes")
    if y.shape[0] != z2.shape[0] or np.any(y < 0) or np.any(y >= z2.shape[1]):
        raise ContractError("label out of range or batch size mismatch")
    rows = np.arange(z2.shape[0])
    target = z2[rows, y]
    others = z2.copy()
    others[rows, y] = -np.inf
    gamma = target - others.max(axis=1)
    return float(gamma[0]) if single else gamma


def classify_flip(label: int, old_pred: int, new_pred: int) -> Outcome:
    old_ok = old_pred == label
    new_ok = new_pred == label
    if old_ok and new_ok:
        return Outcome.CONSISTENT_CORRECT
    if old_ok:
        return Outcome.NEGATIVE_FLIP
    if new_ok:
        return Outcome.POSITIVE_FLIP
    return Outcome.CONSISTENT_WRONG


def _triplet(labels, old_preds, new_preds):
    y = np.asarray(labels, dtype=np.int64)
    a = np.asarray(old_preds, dtype=np.int64)
    b = np.asarray(new_preds, dtype=np.int64)
    if not (y.shape == a.shape == b.shape) or y.ndim != 1:
        raise ContractError("labels and predictions must be equal-length vectors")
    if y.size == 0:
        raise ContractError("no samples to evaluate")
    return y, a, b


def negative_flip_rate(labels, old_preds, new_preds) -> float:
    """Fraction of samples the old model got right and the new one gets wrong.

    Callers pass old-class test samples only.
    """
    y, a, b = _triplet(labels, old_preds, new_preds)
    return float(np.mean((a == y) & (b != y)))


def flip_records(labels, old_preds, new_preds, sample_ids=None) -> list[FlipRecord]:
    y, a, b = _triplet(labels, old_preds, new_preds)
    ids = range(y.size) if sample_ids is None else sample_ids
    return [
        FlipRecord(int(i), int(yi), int(ai), int(bi), classify_flip(yi, ai, bi))
        for i, yi, ai, bi in zip(ids, y, a, b)
    ]


def flip_counts(labels, old_preds, new_preds) -> dict[str, int]:
    y, a, b = _triplet(labels, old_preds, new_preds)
    old_ok, new_ok = a == y, b == y
    return {
        Outcome.CONSISTENT_CORRECT.value: int(np.sum(old_ok & new_ok)),
        Outcome.CONSISTENT_WRONG.value: int(np.sum(~old_ok & ~new_ok)),
        Outcome.POSITIVE_FLIP.value: int(np.sum(~old_ok & new_ok)),
        Outcome.NEGATIVE_FLIP.value: int(np.sum(old_ok & ~new_ok)),
    }


def relative_nfr(nfr: float, er_basemodel: float, er_new_subset: float) -> float:
    denom = (1.0 - er_basemodel) * er_new_subset
    if denom <= 0:
        raise UndefinedMetric("Rel-NFR undefined: old model has no correct samples or new model makes no errors")
    return nfr / denom


def error_rate(labels, preds, subset=None) -> float:
    """Error of ``preds`` on the samples selected by ``subset``.

    ``subset`` may be a boolean mask or a collection of class ids to keep.
    """
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(preds, dtype=np.int64)
    if y.shape != p.shape:
        raise ContractError("labels and predictions differ in length")
    if subset is not None:
        mask = np.asarray(subset)
        if mask.dtype != bool:
            mask = np.isin(y, list(subset))
        y, p = y[mask], p[mask]
    if y.size == 0:
        raise UndefinedMetric("error rate undefined on an empty subset")
    return float(np.mean(p != y))


@dataclass
class UpdateReport:
    er_old_subset: float
    er_all: float
    er_basemodel: float
    nfr: float
    rel_nfr: float | None
    flip_counts: dict[str, int]
    per_class_margins: dict[int, tuple[float, float]]
    old_class_margin_mean: float
    n_old_samples: int
    n_samples: int
    records: list[FlipRecord] = field(default_factory=list, repr=False)

    def check_invariants(self, atol: float = 1e-12) -> None:
        if self.nfr > self.er_old_subset + atol:
            raise AssertionError(f"NFR {self.nfr} exceeds new-model old-class error {self.er_old_subset}")
        if self.nfr > 1.0 - self.er_basemodel + atol:
            raise AssertionError(f"NFR {self.nfr} exceeds old-model accuracy {1 - self.er_basemodel}")
        if sum(self.flip_counts.values()) != self.n_old_samples:
            raise AssertionError("flip outcome counts do not sum to the evaluated sample count")
        denom = (1.0 - self.er_basemodel) * self.er_old_subset
        if denom > 0:
            if self.rel_nfr is None or abs(self.rel_nfr - self.nfr / denom) > 1e-9:
                raise AssertionError("Rel-NFR inconsistent with its components")
        elif self.rel_nfr is not None:
            raise AssertionError("Rel-NFR must be absent when its denominator is zero")

    def to_dict(self, include_records: bool = False) -> dict:
        d = {
            "er_old_subset": self.er_old_subset,
            "er_all": self.er_all,
            "er_basemodel": self.er_basemodel,
            "nfr": self.nfr,
            "rel_nfr": self.rel_nfr,
            "flip_counts": dict(self.flip_counts),
            "per_class_margins": {
                str(c): {"mean": m, "std": s} for c, (m, s) in sorted(self.per_class_margins.items())
            },
            "old_class_margin_mean": self.old_class_margin_mean,
            "n_old_samples": self.n_old_samples,
            "n_samples": self.n_samples,
        }
        if include_records:
            d["records"] = [
                {
                    "sample_id": r.sample_id,
                    "label": r.label,
                    "old_pred": r.old_pred,
                    "new_pred": r.new_pred,
                    "outcome": r.outcome.value,
                }
                for r in self.records
            ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UpdateReport":
        records = [
            FlipRecord(r["sample_id"], r["label"], r["old_pred"], r["new_pred"], Outcome(r["outcome"]))
            for r in d.get("records", [])
        ]
        return cls(
            er_old_subset=d["er_old_subset"],
            er_all=d["er_all"],
            er_basemodel=d["er_basemodel"],
            nfr=d["nfr"],
            rel_nfr=d["rel_nfr"],
            flip_counts=dict(d["flip_counts"]),
            per_class_margins={int(c): (v["mean"], v["std"]) for c, v in d["per_class_margins"].items()},
            old_class_margin_mean=d["old_class_margin_mean"],
            n_old_samples=d["n_old_samples"],
            n_samples=d["n_samples"],
            records=records,
        )


def build_update_report(labels, old_preds_on_old, new_logits, old_mask, *, keep_records: bool = False) -> UpdateReport:
    """Assemble an :class:`UpdateReport`.

    ``old_preds_on_old`` are the old model's predictions (original class ids)
    for the samples selected by ``old_mask``; ``new_logits`` cover every sample.
    """
    y = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(old_mask, dtype=bool)
    z = np.asarray(new_logits, dtype=np.float64)
    new_preds = predict(z)
    y_old = y[mask]
    new_old = new_preds[mask]
    old_preds = np.asarray(old_preds_on_old, dtype=np.int64)

    er_old = error_rate(y_old, new_old)
    er_base = error_rate(y_old, old_preds)
    nfr = negative_flip_rate(y_old, old_preds, new_old)
    try:
        rel = relative_nfr(nfr, er_base, er_old)
    except UndefinedMetric:
        rel = None

    gammas = logit_margin(z, y)
    margins = {}
    # classes padded with -inf (not covered by the model) get no margin entry
    covered = np.isfinite(z).all(axis=0)
    for c in sorted(set(y.tolist())):
        if covered[c]:
            g = gammas[y == c]
            margins[int(c)] = (float(np.mean(g)), float(np.std(g)))
    ids = np.flatnonzero(mask)
    report = UpdateReport(
        er_old_subset=er_old,
        er_all=error_rate(y, new_preds),
        er_basemodel=er_base,
        nfr=nfr,
        rel_nfr=rel,
        flip_counts=flip_counts(y_old, old_preds, new_old),
        per_class_margins=margins,
        old_class_margin_mean=float(np.mean(gammas[mask])),
        n_old_samples=int(mask.sum()),
        n_samples=int(y.size),
        records=flip_records(y_old, old_preds, new_old, ids) if keep_records else [],
    )
    report.check_invariants()
    return report


def outcome_histogram(records: list[FlipRecord]) -> dict[str, int]:
    counts = Counter(r.outcome.value for r in records)
    return {o.value: counts.get(o.value, 0) for o in Outcome}
