"""JSON result documents, Table-1-style summaries, and SVG figures."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .pipeline import ScenarioResult

SCHEMA_VERSION = "1.0"
METRIC_KEYS = ("er_old_subset", "er_all", "er_basemodel", "nfr", "rel_nfr", "old_class_margin_mean")


class ReportValidationError(ValueError):
    pass


class UnsupportedDimension(ValueError):
    """Embedding plots need checkpoints whose embedding layer is 2-D."""


# ---------------------------------------------------------------- schemas


@lru_cache(maxsize=None)
def _schema(name: str) -> dict:
    text = resources.files("mptkit").joinpath("schemas", f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


@lru_cache(maxsize=None)
def _validator(name: str):
    from jsonschema import Draft202012Validator
    from referencing import Registry, Resource

    registry = Registry().with_resources(
        (_schema(n)["$id"], Resource.from_contents(_schema(n))) for n in ("update_report", "scenario_report")
    )
    return Draft202012Validator(_schema(name), registry=registry)


def validate(doc: dict, kind: str = "scenario_report") -> None:
    """Raise :class:`ReportValidationError` listing every schema violation."""
    errors = sorted(_validator(kind).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors[:20]]
        raise ReportValidationError("; ".join(lines))


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(doc: dict, path, kind: str) -> None:
    validate(doc, kind)
    Path(path).write_text(dumps(doc), encoding="utf-8")


def read_json(path, kind: str) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    validate(doc, kind)
    return doc


# ---------------------------------------------------------------- scenario document


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp so reruns produce byte-identical reports
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), tz=timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.replace(microsecond=0).isoformat()


def _stats(values: Sequence[float]) -> dict | None:
    if not values:
        return None
    arr = np.asarray(values, dtype=np.float64)
    return {
        "median": float(np.median(arr)),
        "mean": float(np.mean(arr)),
        "min": float(np.min(arr)),
        "max": float(np.max(arr)),
    }


def aggregate_runs(runs: list[dict]) -> dict:
    """Per-label statistics over seeds, computed only from serialized run entries."""
    labels: list[str] = []
    for r in runs:
        if r["label"] not in labels:
            labels.append(r["label"])
    out = {}
    for label in labels:
        mine = [r for r in runs if r["label"] == label]
        ok = [r["report"] for r in mine if r["status"] == "ok"]
        out[label] = {
            "n_ok": len(ok),
            "n_failed": len(mine) - len(ok),
            "metrics": {k: _stats([rep[k] for rep in ok if rep[k] is not None]) for k in METRIC_KEYS},
        }
    return out


@dataclass
class ReportDocument:
    config: dict
    runs: list[dict]
    old_model: list[dict]
    provenance: dict
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = aggregate_runs(self.runs)

    @classmethod
    def from_result(cls, result: ScenarioResult) -> "ReportDocument":
        return cls(
            config=result.config.to_dict(),
            runs=[e.to_dict() for e in result.entries],
            old_model=[
                {"seed": seed, "er_basemodel": rep["er_basemodel"]} for seed, rep in sorted(result.old_reports.items())
            ],
            provenance={
                "seeds": list(result.config.seeds),
                "timestamp": _timestamp(),
                "toolkit_version": __version__,
            },
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "mptkit.scenario_report",
            "config": self.config,
            "provenance": self.provenance,
            "old_model": self.old_model,
            "runs": self.runs,
            "aggregates": self.aggregates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReportDocument":
        validate(d, "scenario_report")
        doc = cls(d["config"], d["runs"], d["old_model"], d["provenance"], d["aggregates"])
        if aggregate_runs(doc.runs) != doc.aggregates:
            raise ReportValidationError("aggregates do not match the per-seed run entries")
        return doc

    def save(self, path) -> None:
        write_json(self.to_dict(), path, "scenario_report")

    @classmethod
    def load(cls, path) -> "ReportDocument":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def median(self, label: str, metric: str) -> float | None:
        stats = self.aggregates.get(label, {}).get("metrics", {}).get(metric)
        return None if stats is None else stats["median"]

    def labels(self) -> list[str]:
        return list(self.aggregates)

    def sweep(self) -> list[tuple[float, str]]:
        """``(k, label)`` for runs generated by a k sweep, sorted by k."""
        seen = {}
        for r in self.runs:
            if "@k=" in r["label"]:
                seen[r["label"]] = r["method"]["k"]
        return sorted((k, label) for label, k in seen.items())


# ---------------------------------------------------------------- summaries


def label_order(doc: dict) -> list[str]:
    """Run labels in the order the scenario config lists them."""
    return [m["name"] for m in doc["config"]["methods"] if m["name"] in doc["aggregates"]]


SUMMARY_HEADER = ("Method", "ER old (%)", "ER all (%)", "NFR (%)", "Rel-NFR (%)")


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100.0 * v:.2f}"


def summary_rows(doc: dict) -> list[tuple[str, ...]]:
    """Seed-median headline rows, read straight from a serialized scenario report."""
    old = [o["er_basemodel"] for o in doc["old_model"]]
    rows = [("Old model", _pct(float(np.median(old)) if old else None), "-", "-", "-")]
    for label in label_order(doc):
        m = doc["aggregates"][label]["metrics"]

        def med(key):
            return None if m.get(key) is None else m[key]["median"]

        rows.append((label, _pct(med("er_old_subset")), _pct(med("er_all")), _pct(med("nfr")), _pct(med("rel_nfr"))))
    return rows


def format_table(rows: Sequence[Sequence[str]], header: Sequence[str] = SUMMARY_HEADER) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def summary_csv(rows: Sequence[Sequence[str]], header: Sequence[str] = SUMMARY_HEADER) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def headline(report: dict) -> str:
    """The four headline numbers of an update report, as printed by ``evaluate``."""
    rel = report["rel_nfr"]
    return (
        f"ER_old={report['er_old_subset']!r} ER_all={report['er_all']!r} "
        f"NFR={report['nfr']!r} Rel-NFR={'null' if rel is None else repr(rel)}"
    )


# ---------------------------------------------------------------- figures

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update(
        {
            "svg.hashsalt": "mptkit",
            "svg.fonttype": "none",
            "font.size": 9,
            "axes.spines.top": False,
            "axes.spines.right": False,
        }
    )
    return plt


def _save_svg(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None}, bbox_inches=None)


@dataclass
class EmbeddingPlotSpec:
    point_size: float = 8.0
    palette: Sequence[str] = PALETTE
    bounds: str = "auto"  # "auto" or "fixed"
    limits: tuple[float, float, float, float] | None = None  # xmin, xmax, ymin, ymax when fixed
    titles: Sequence[str] | None = None

    def color(self, label: int) -> str:
        return self.palette[label % len(self.palette)]


def plot_embeddings(embeddings: Sequence[np.ndarray], labels, path, spec: EmbeddingPlotSpec | None = None) -> None:
    """One scatter panel per model, points coloured by true class.

    Each panel's points are written as a group with id ``points-<i>``.
    """
    spec = spec or EmbeddingPlotSpec()
    y = np.asarray(labels, dtype=np.int64)
    for e in embeddings:
        if e.ndim != 2 or e.shape[1] != 2:
            raise UnsupportedDimension(f"embedding plots need 2-D embeddings, got width {e.shape[-1]}")
        if e.shape[0] != y.size:
            raise ValueError("embedding rows and labels differ in length")
    titles = list(spec.titles) if spec.titles is not None else [f"model {i}" for i in range(len(embeddings))]
    if len(titles) != len(embeddings):
        raise ValueError("need one title per panel")
    plt = _pyplot()
    n = len(embeddings)
    cols = min(n, 3)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 3.2 * rows), squeeze=False)
    colors = [spec.color(int(c)) for c in y]
    for i, ax in enumerate(axes.flat):
        if i >= n:
            ax.set_visible(False)
            continue
        e = embeddings[i]
        coll = ax.scatter(e[:, 0], e[:, 1], s=spec.point_size, c=colors, linewidths=0)
        coll.set_gid(f"points-{i}")
        ax.set_title(titles[i])
        if spec.bounds == "fixed" and spec.limits is not None:
            ax.set_xlim(spec.limits[0], spec.limits[1])
            ax.set_ylim(spec.limits[2], spec.limits[3])
        ax.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def plot_method_summary(doc: dict, path) -> None:
    """Bars: seed-median ER on all classes; line: seed-median NFR, per method."""
    labels = [lab for lab in label_order(doc) if "@k=" not in lab]
    _bar_line(doc, labels, labels, path, "method")


def plot_k_sweep(doc: dict, path) -> None:
    sweep = ReportDocument(doc["config"], doc["runs"], doc["old_model"], doc["provenance"], doc["aggregates"]).sweep()
    if not sweep:
        return
    _bar_line(doc, [lab for _, lab in sweep], [f"{k:g}" for k, _ in sweep], path, "margin bias k")


def _bar_line(doc: dict, labels, ticks, path, xlabel: str) -> None:
    def med(label, key):
        stats = doc["aggregates"][label]["metrics"].get(key)
        return np.nan if stats is None else 100.0 * stats["median"]

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(labels) + 1.5), 3.2))
    x = np.arange(len(labels))
    ax.bar(x, [med(lab, "er_all") for lab in labels], color="#c6dbef", label="ER all (%)")
    ax.set_ylabel("ER on all classes (%)")
    ax.set_xticks(x)
    ax.set_xticklabels(ticks, rotation=30 if xlabel == "method" else 0, ha="right" if xlabel == "method" else "center")
    ax.set_xlabel(xlabel)
    ax2 = ax.twinx()
    ax2.plot(x, [med(lab, "nfr") for lab in labels], "o-", color="#d62728", label="NFR (%)")
    ax2.set_ylabel("NFR (%)")
    ax2.set_ylim(bottom=0)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)
