"""Three-model update protocol: old model, reference model, updated student.

A scenario trains, for every seed, one old model on the old classes and one
reference model on all classes, then one student per requested method.  All
students of a seed share the old/reference checkpoints and the same student
initialisation and shuffling, so the method is the only thing that varies.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import (
    Dataset,
    SplitSpec,
    concentric_rings,
    expand_predictions,
    gaussian_blobs,
    load_csv,
    partition_classes,
    restrict_to_classes,
    standardize,
)
from .losses import (
    ClassPartition,
    FocalDistillationConfig,
    MarginBias,
    MptObjectiveConfig,
    ReferenceOutputs,
    mpt_objective,
)
from .mathcore import (
    ArchSpec,
    ContractError,
    LrSchedule,
    MlpModel,
    OptimizerState,
    TrainingDiverged,
    backward,
    forward,
    lr_at,
    sgd_step,
)
from .metrics import UpdateReport, build_update_report, predict

log = logging.getLogger(__name__)

METHODS = ("NoTreatment", "PCT-KL", "PCT-LM", "MPT-KL", "MPT-LM", "MPT-NoBias", "MPT-NoDistill")
DEFAULT_LAMBDA = {"KL": 1.0, "LM": 0.4}
ROLE_OLD, ROLE_REFERENCE, ROLE_STUDENT = 0, 1, 2


class ConfigError(ValueError):
    """Scenario configuration failed validation; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, from another format version, or incompatible."""


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class MethodSpec:
    name: str
    method: str
    k: float = 0.0
    lam: float = 0.0
    distance: str = "KL"

    @property
    def uses_old(self) -> bool:
        return self.lam > 0 and self.method != "NoTreatment"

    @property
    def uses_reference(self) -> bool:
        return self.lam > 0 and self.method.startswith("MPT")

    def objective_key(self) -> tuple:
        return (self.k, self.lam, self.distance if self.lam > 0 else None, self.uses_old, self.uses_reference)

    def to_dict(self) -> dict:
        return {"name": self.name, "method": self.method, "k": self.k, "lambda": self.lam, "distance": self.distance}


def make_method(
    entry: dict, default_k: float, errors: list[str], where: str, lambdas: dict[str, float] | None = None
) -> MethodSpec | None:
    """Fill per-method defaults and enforce the method constraints."""
    method = entry.get("method")
    if method not in METHODS:
        errors.append(f"{where}.method: must be one of {', '.join(METHODS)}, got {method!r}")
        return None
    fixed_distance = {"PCT-KL": "KL", "PCT-LM": "LM", "MPT-KL": "KL", "MPT-LM": "LM"}.get(method)
    distance = entry.get("distance", fixed_distance or "KL")
    if distance not in ("KL", "LM"):
        errors.append(f"{where}.distance: must be 'KL' or 'LM', got {distance!r}")
        return None
    if fixed_distance and distance != fixed_distance:
        errors.append(f"{where}.distance: {method} implies {fixed_distance}")
    biased = method in ("MPT-KL", "MPT-LM", "MPT-NoDistill")
    distilled = method not in ("NoTreatment", "MPT-NoDistill")
    try:
        k = float(entry.get("k", default_k if biased else 0.0))
        lam = float(entry.get("lambda", (lambdas or DEFAULT_LAMBDA)[distance] if distilled else 0.0))
    except (TypeError, ValueError):
        errors.append(f"{where}: k and lambda must be numbers")
        return None
    if k < 0:
        errors.append(f"{where}.k: must be non-negative")
    if lam < 0:
        errors.append(f"{where}.lambda: must be non-negative")
    if not biased and k != 0:
        errors.append(f"{where}.k: {method} requires k = 0, got {k}")
    if not distilled and lam != 0:
        errors.append(f"{where}.lambda: {method} requires lambda = 0, got {lam}")
    unknown = set(entry) - {"method", "name", "k", "lambda", "distance"}
    if unknown:
        errors.append(f"{where}: unknown keys {sorted(unknown)}")
    return MethodSpec(str(entry.get("name", method)), method, k, lam, distance)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 0.1
    momentum: float = 0.9
    schedule: str = "cosine"


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    params: dict = field(default_factory=dict)


@dataclass
class ScenarioConfig:
    name: str
    dataset: DatasetSpec
    hidden: tuple[int, ...]
    embedding_dim: int
    train: TrainSpec
    split: SplitSpec
    focal: FocalDistillationConfig
    methods: list[MethodSpec]
    seeds: list[int]
    default_k: float = 4.0
    lambdas: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LAMBDA))
    base_dir: str | None = None

    def method(self, name: str) -> MethodSpec:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": {"kind": self.dataset.kind, **self.dataset.params},
            "model": {"hidden": list(self.hidden), "embedding_dim": self.embedding_dim},
            "train": asdict(self.train),
            "split": asdict(self.split),
            "focal": {
                "alpha": self.focal.alpha,
                "beta": self.focal.beta,
                "temperature": self.focal.temperature,
            },
            "k": self.default_k,
            "lambda": dict(self.lambdas),
            "methods": [m.to_dict() for m in self.methods],
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | Path | None = None) -> "ScenarioConfig":
        """Parse and validate; raises :class:`ConfigError` listing every field error."""
        errors: list[str] = []
        if not isinstance(raw, dict):
            raise ConfigError(["config must be a mapping"])
        allowed = {"name", "dataset", "model", "train", "split", "focal", "k", "lambda", "methods", "sweep", "seeds"}
        if set(raw) - allowed:
            errors.append(f"unknown top-level keys {sorted(set(raw) - allowed)}")

        ds = dict(raw.get("dataset") or {})
        kind = ds.pop("kind", "blobs")
        if kind not in ("blobs", "rings", "csv"):
            errors.append(f"dataset.kind: must be blobs, rings or csv, got {kind!r}")
        if kind == "csv":
            for key in ("train", "test"):
                if key not in ds:
                    errors.append(f"dataset.{key}: required for csv datasets")
        dataset = DatasetSpec(kind, ds)

        model = raw.get("model") or {}
        hidden = tuple(model.get("hidden", (32, 32)))
        embedding_dim = model.get("embedding_dim", 2)
        if not all(isinstance(h, int) and h > 0 for h in hidden):
            errors.append("model.hidden: must be a list of positive integers")
        if not isinstance(embedding_dim, int) or embedding_dim < 1:
            errors.append("model.embedding_dim: must be a positive integer")

        tr = raw.get("train") or {}
        try:
            train = TrainSpec(**tr)
        except TypeError as exc:
            errors.append(f"train: {exc}")
            train = TrainSpec()
        if not isinstance(train.epochs, int) or train.epochs < 0:
            errors.append("train.epochs: must be a non-negative integer")
        if not isinstance(train.batch_size, int) or train.batch_size < 1:
            errors.append("train.batch_size: must be a positive integer")
        if not train.base_lr > 0:
            errors.append("train.base_lr: must be positive")
        if not 0 <= train.momentum < 1:
            errors.append("train.momentum: must lie in [0, 1)")
        if train.schedule not in ("cosine", "constant"):
            errors.append("train.schedule: must be cosine or constant")

        try:
            split = SplitSpec(**(raw.get("split") or {}))
        except (TypeError, ContractError) as exc:
            errors.append(f"split: {exc}")
            split = SplitSpec()

        fc = raw.get("focal") or {}
        try:
            focal = FocalDistillationConfig(
                alpha=float(fc.get("alpha", 1.0)),
                beta=float(fc.get("beta", 5.0)),
                temperature=float(fc.get("temperature", 1.0)),
            )
            if set(fc) - {"alpha", "beta", "temperature"}:
                errors.append(f"focal: unknown keys {sorted(set(fc) - {'alpha', 'beta', 'temperature'})}")
        except (ContractError, ValueError, TypeError) as exc:
            errors.append(f"focal: {exc}")
            focal = FocalDistillationConfig()

        default_k = raw.get("k", 4.0)
        if not isinstance(default_k, (int, float)) or default_k < 0:
            errors.append("k: must be a non-negative number")
            default_k = 4.0

        lambdas = dict(DEFAULT_LAMBDA)
        lam_raw = raw.get("lambda") or {}
        if not isinstance(lam_raw, dict) or set(lam_raw) - set(DEFAULT_LAMBDA):
            errors.append("lambda: must map KL and/or LM to non-negative numbers")
        else:
            for key, v in lam_raw.items():
                if not isinstance(v, (int, float)) or v < 0:
                    errors.append(f"lambda.{key}: must be a non-negative number")
                else:
                    lambdas[key] = float(v)

        methods: list[MethodSpec] = []
        for i, entry in enumerate(raw.get("methods") or []):
            if isinstance(entry, str):
                entry = {"method": entry}
            if not isinstance(entry, dict):
                errors.append(f"methods[{i}]: must be a method name or mapping")
                continue
            m = make_method(entry, float(default_k), errors, f"methods[{i}]", lambdas)
            if m is not None:
                methods.append(m)
        sweep = raw.get("sweep")
        if sweep:
            base = sweep.get("method", "MPT-KL")
            for k in sweep.get("k", []):
                entry = {"method": base, "k": k, "name": f"{base}@k={k:g}"}
                if "lambda" in sweep:
                    entry["lambda"] = sweep["lambda"]
                m = make_method(entry, float(default_k), errors, f"sweep(k={k})", lambdas)
                if m is not None:
                    methods.append(m)
        if not methods:
            errors.append("methods: at least one method is required")
        names = [m.name for m in methods]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            errors.append(f"methods: duplicate run names {dupes}")

        seeds = raw.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            errors.append("seeds: must be a non-empty list of integers")
            seeds = [0]

        if errors:
            raise ConfigError(errors)
        return cls(
            name=str(raw.get("name", "scenario")),
            dataset=dataset,
            hidden=hidden,
            embedding_dim=embedding_dim,
            train=train,
            split=split,
            focal=focal,
            methods=methods,
            seeds=list(seeds),
            default_k=float(default_k),
            lambdas=lambdas,
            base_dir=str(base_dir) if base_dir is not None else None,
        )


def load_config(path) -> ScenarioConfig:
    import yaml

    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML: {exc}"]) from None
    return ScenarioConfig.from_dict(raw, base_dir=path.parent)


@dataclass
class ScenarioData:
    train: Dataset
    test: Dataset
    partition: ClassPartition


def load_scenario_data(cfg: ScenarioConfig) -> ScenarioData:
    p = dict(cfg.dataset.params)
    if cfg.dataset.kind == "blobs":
        train, test = gaussian_blobs(
            int(p.get("classes", 8)),
            int(p.get("n_train", 100)),
            int(p.get("n_test", 100)),
            dim=int(p.get("dim", 2)),
            radius=float(p.get("radius", 4.0)),
            sigma=float(p.get("sigma", 0.5)),
            seed=int(p.get("seed", 0)),
        )
    elif cfg.dataset.kind == "rings":
        train, test = concentric_rings(
            int(p.get("classes", 4)),
            int(p.get("n_train", 100)),
            int(p.get("n_test", 100)),
            noise=float(p.get("noise", 0.1)),
            seed=int(p.get("seed", 0)),
            radius_step=float(p.get("radius_step", 1.0)),
        )
    else:
        base = Path(cfg.base_dir or ".")
        cc = p.get("classes")
        header = bool(p.get("header", False))
        train = load_csv(base / p["train"], class_count=cc, header=header, split="train")
        test = load_csv(base / p["test"], class_count=cc or train.class_count, header=header, split="test")
        if train.class_count != test.class_count:
            raise ConfigError(["dataset: train and test class counts differ"])
        if p.get("standardize", True):
            train, test = standardize(train, test)
    return ScenarioData(train, test, partition_classes(train.class_count, cfg.split))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MPTKCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sHI")


@dataclass
class ModelCheckpoint:
    model: MlpModel
    class_map: tuple[int, ...]
    config_digest: str
    seed: int
    epochs: int
    label: str = ""

    @property
    def arch(self) -> ArchSpec:
        return self.model.arch

    def logits(self, features) -> np.ndarray:
        return forward(self.model, features)[1]

    def embeddings(self, features) -> np.ndarray:
        return forward(self.model, features)[0]

    def predict_original(self, features) -> np.ndarray:
        """Argmax predictions mapped to original class ids."""
        return expand_predictions(predict(self.logits(features)), self.class_map)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    params = ckpt.model.params()
    header = {
        "arch": ckpt.arch.to_dict(),
        "class_map": list(ckpt.class_map),
        "config_digest": ckpt.config_digest,
        "seed": ckpt.seed,
        "epochs": ckpt.epochs,
        "label": ckpt.label,
        "tensors": [list(p.shape) for p in params],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params)
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hb)) + hb + payload
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path, expected_arch: ArchSpec | None = None) -> ModelCheckpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from None
    if len(blob) < _PREFIX.size + 32:
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated)")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: corrupt checkpoint (checksum mismatch or truncated)")
    try:
        header = json.loads(body[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
        arch = ArchSpec.from_dict(header["arch"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"{path}: architecture {arch.to_dict()} does not match expected {expected_arch.to_dict()}")
    widths = arch.widths
    expected_shapes = []
    for a, b in zip(widths[:-1], widths[1:]):
        expected_shapes += [[a, b], [b]]
    if header["tensors"] != expected_shapes:
        raise CheckpointError(f"{path}: tensor shapes {header['tensors']} do not match the architecture")
    payload = body[_PREFIX.size + hlen :]
    n = sum(int(np.prod(s)) for s in expected_shapes)
    if len(payload) != 8 * n:
        raise CheckpointError(f"{path}: corrupt checkpoint (payload size {len(payload)} != {8 * n})")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    tensors, off = [], 0
    for s in expected_shapes:
        size = int(np.prod(s))
        tensors.append(flat[off : off + size].reshape(s).copy())
        off += size
    model = MlpModel(arch, tensors[0::2], tensors[1::2])
    if len(header["class_map"]) != arch.class_count:
        raise CheckpointError(f"{path}: class map length does not match class count")
    return ModelCheckpoint(
        model, tuple(header["class_map"]), header["config_digest"], header["seed"], header["epochs"], header["label"]
    )


# ---------------------------------------------------------------- training


@dataclass
class TrainLog:
    step_losses: list[float] = field(default_factory=list)
    epochs: list[dict[str, float]] = field(default_factory=list)


def _digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def _seed_for(seed: int, role: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, role, stream])


Objective = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[float, np.ndarray, dict[str, float]]]


def train_model(
    arch: ArchSpec,
    features: np.ndarray,
    labels: np.ndarray,
    objective: Objective,
    train: TrainSpec,
    seed: int,
    role: int,
) -> tuple[MlpModel, TrainLog]:
    """Mini-batch SGD; ``objective(batch_x, logits, batch_y) -> (loss, dlogits, terms)``."""
    model = MlpModel.init(arch, _seed_for(seed, role, 0))
    shuffle_rng = np.random.default_rng(_seed_for(seed, role, 1))
    state = OptimizerState.for_model(model, train.momentum, train.base_lr)
    schedule = LrSchedule(train.schedule, train.epochs, train.base_lr)
    tlog = TrainLog()
    n = labels.shape[0]
    for epoch in range(train.epochs):
        lr = lr_at(schedule, epoch)
        order = shuffle_rng.permutation(n)
        sums: dict[str, float] = {}
        batches = 0
        for start in range(0, n, train.batch_size):
            idx = order[start : start + train.batch_size]
            xb, yb = features[idx], labels[idx]
            _, logits, cache = forward(model, xb)
            loss, dlogits, terms = objective(xb, logits, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {len(tlog.step_losses)}")
            sgd_step(model, backward(model, cache, dlogits), state, lr)
            tlog.step_losses.append(loss)
            for key, v in terms.items():
                sums[key] = sums.get(key, 0.0) + v
            batches += 1
        tlog.epochs.append({"epoch": epoch, "lr": lr, **{key: v / batches for key, v in sums.items()}})
    return model, tlog


def _arch(cfg: ScenarioConfig, data: ScenarioData, class_count: int) -> ArchSpec:
    return ArchSpec(data.train.dim, cfg.hidden, cfg.embedding_dim, class_count)


def _cross_entropy_objective(class_count: int) -> Objective:
    cfg = MptObjectiveConfig(
        MarginBias(0.0, ClassPartition(tuple(range(class_count)), ())), 0.0, FocalDistillationConfig()
    )

    def objective(xb, logits, yb):
        return mpt_objective(logits, yb, None, None, cfg)

    return objective


def train_old(cfg: ScenarioConfig, data: ScenarioData, seed: int) -> tuple[ModelCheckpoint, TrainLog]:
    """Plain cross-entropy on the old-class training samples (densely re-indexed)."""
    old_train, class_map = restrict_to_classes(data.train, data.partition.old_classes)
    arch = _arch(cfg, data, len(class_map))
    model, tlog = train_model(
        arch, old_train.features, old_train.labels, _cross_entropy_objective(len(class_map)), cfg.train, seed, ROLE_OLD
    )
    digest = _digest({"role": "old", "arch": arch.to_dict(), "train": asdict(cfg.train), "data": cfg.to_dict()["dataset"]})
    return ModelCheckpoint(model, class_map, digest, seed, cfg.train.epochs, "old"), tlog


def train_reference(cfg: ScenarioConfig, data: ScenarioData, seed: int) -> tuple[ModelCheckpoint, TrainLog]:
    """Plain cross-entropy on all classes with its own initialisation stream."""
    c = data.partition.class_count
    arch = _arch(cfg, data, c)
    model, tlog = train_model(
        arch, data.train.features, data.train.labels, _cross_entropy_objective(c), cfg.train, seed, ROLE_REFERENCE
    )
    digest = _digest({"role": "reference", "arch": arch.to_dict(), "train": asdict(cfg.train), "data": cfg.to_dict()["dataset"]})
    return ModelCheckpoint(model, tuple(range(c)), digest, seed, cfg.train.epochs, "reference"), tlog


def _check_old(old: ModelCheckpoint, partition: ClassPartition) -> None:
    if tuple(old.class_map) != partition.old_classes:
        raise ContractError(f"old checkpoint classes {old.class_map} != partition old classes {partition.old_classes}")


def _check_full(ckpt: ModelCheckpoint, partition: ClassPartition, what: str) -> None:
    if tuple(ckpt.class_map) != tuple(range(partition.class_count)):
        raise ContractError(f"{what} checkpoint must cover all {partition.class_count} classes")


def train_updated(
    cfg: ScenarioConfig,
    data: ScenarioData,
    method: MethodSpec,
    seed: int,
    old: ModelCheckpoint | None,
    reference: ModelCheckpoint | None = None,
) -> tuple[ModelCheckpoint, TrainLog]:
    part = data.partition
    if method.uses_old:
        if old is None:
            raise ConfigError([f"{method.name}: old checkpoint is required"])
        _check_old(old, part)
    if method.uses_reference:
        if reference is None:
            raise ConfigError([f"{method.name}: reference checkpoint is required"])
        _check_full(reference, part, "reference")
    focal = FocalDistillationConfig(cfg.focal.alpha, cfg.focal.beta, method.distance, cfg.focal.temperature)
    obj_cfg = MptObjectiveConfig(MarginBias(method.k, part), method.lam, focal)
    use_old = old if method.uses_old else None
    use_ref = reference if method.uses_reference else None

    def objective(xb, logits, yb):
        old_out = ref_out = None
        if use_old is not None:
            zo = use_old.logits(xb)
            old_out = ReferenceOutputs(zo, expand_predictions(predict(zo), use_old.class_map), part.old_classes)
        if use_ref is not None:
            zr = use_ref.logits(xb)
            ref_out = ReferenceOutputs(zr, predict(zr))
        return mpt_objective(logits, yb, old_out, ref_out, obj_cfg)

    arch = _arch(cfg, data, part.class_count)
    model, tlog = train_model(arch, data.train.features, data.train.labels, objective, cfg.train, seed, ROLE_STUDENT)
    digest = _digest(
        {
            "role": "student",
            "arch": arch.to_dict(),
            "train": asdict(cfg.train),
            "method": method.to_dict(),
            "focal": asdict(focal),
        }
    )
    return ModelCheckpoint(model, tuple(range(part.class_count)), digest, seed, cfg.train.epochs, method.name), tlog


def evaluate_update(
    old: ModelCheckpoint,
    new: ModelCheckpoint,
    test: Dataset,
    partition: ClassPartition,
    keep_records: bool = False,
) -> UpdateReport:
    """Flip and error metrics of ``new`` against ``old`` on ``test``.

    When ``new`` covers only the old classes (e.g. comparing the old model with
    itself) its predictions are mapped through its own class map, and margins
    are measured in its own logit space.
    """
    _check_old(old, partition)
    if test.class_count != partition.class_count:
        raise ContractError("test data class count does not match the partition")
    if old.arch.input_dim != test.dim or new.arch.input_dim != test.dim:
        raise ContractError("checkpoint input width does not match test features")
    mask = partition.is_old(test.labels)
    old_preds = old.predict_original(test.features[mask])
    new_logits = new.logits(test.features)
    if tuple(new.class_map) != tuple(range(partition.class_count)):
        if not set(new.class_map) <= set(range(partition.class_count)):
            raise ContractError("new checkpoint class map is not a subset of the partition classes")
        padded = np.full((new_logits.shape[0], partition.class_count), -np.inf)
        padded[:, list(new.class_map)] = new_logits
        new_logits = padded
    return build_update_report(test.labels, old_preds, new_logits, mask, keep_records=keep_records)


# ---------------------------------------------------------------- scenarios


@dataclass
class RunEntry:
    label: str
    method: dict
    seed: int
    report: UpdateReport | None = None
    error: str | None = None
    epochs: list[dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "method": self.method,
            "seed": self.seed,
            "status": "ok" if self.error is None else "failed",
            "report": None if self.report is None else self.report.to_dict(),
            "error": self.error,
            "epochs": self.epochs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunEntry":
        rep = None if d["report"] is None else UpdateReport.from_dict(d["report"])
        return cls(d["label"], d["method"], d["seed"], rep, d["error"], d.get("epochs", []))


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    entries: list[RunEntry]
    old_reports: dict[int, dict] = field(default_factory=dict)
    checkpoints: dict[tuple[int, str], ModelCheckpoint] = field(default_factory=dict, repr=False)
    data: ScenarioData | None = field(default=None, repr=False)

    def entries_for(self, label: str) -> list[RunEntry]:
        return [e for e in self.entries if e.label == label]

    def metric(self, label: str, key: str) -> list[float]:
        out = []
        for e in self.entries_for(label):
            if e.report is not None:
                v = getattr(e.report, key)
                if v is not None:
                    out.append(v)
        return out

    def median(self, label: str, key: str) -> float | None:
        vals = self.metric(label, key)
        return float(np.median(vals)) if vals else None


def _safe(label: str) -> str:
    return label.replace("/", "_").replace("@", "_at_").replace("=", "")


def _run_path(out_dir: Path, label: str, seed: int) -> Path:
    return out_dir / "runs" / f"{_safe(label)}__seed{seed}.json"


def run_scenario(
    cfg: ScenarioConfig,
    out_dir=None,
    resume: bool = False,
    progress: Callable[[str], None] | None = None,
) -> ScenarioResult:
    """Train old/reference models per seed, then every method; collect reports.

    With ``out_dir`` set, checkpoints go to ``out_dir/checkpoints`` and each
    (method, seed) entry to ``out_dir/runs``.  ``resume`` reuses existing entries
    and checkpoints instead of retraining.
    """
    say = progress or (lambda msg: log.info(msg))
    data = load_scenario_data(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "runs").mkdir(parents=True, exist_ok=True)
    result = ScenarioResult(cfg, [], data=data)
    need_ref = any(m.uses_reference for m in cfg.methods)

    for seed in cfg.seeds:
        ckdir = out / "checkpoints" / f"seed{seed}" if out is not None else None
        if ckdir is not None:
            ckdir.mkdir(parents=True, exist_ok=True)

        def shared(name: str, trainer) -> ModelCheckpoint:
            path = ckdir / f"{name}.ckpt" if ckdir is not None else None
            if resume and path is not None and path.exists():
                return load_checkpoint(path)
            say(f"seed {seed}: training {name} model")
            ckpt, _ = trainer(cfg, data, seed)
            if path is not None:
                save_checkpoint(ckpt, path)
            return ckpt

        old = ref = None
        try:
            old = shared("old", train_old)
            if need_ref:
                ref = shared("reference", train_reference)
        except Exception as exc:  # noqa: BLE001 - recorded as failure entries
            msg = f"{type(exc).__name__}: {exc}"
            for m in cfg.methods:
                result.entries.append(RunEntry(m.name, m.to_dict(), seed, error=f"shared model training failed: {msg}"))
            continue
        result.checkpoints[(seed, "old")] = old
        if ref is not None:
            result.checkpoints[(seed, "reference")] = ref
        result.old_reports[seed] = evaluate_update(old, old, data.test, data.partition).to_dict()

        done: dict[tuple, tuple[RunEntry, ModelCheckpoint | None]] = {}
        for m in cfg.methods:
            path = _run_path(out, m.name, seed) if out is not None else None
            if resume and path is not None and path.exists():
                entry = RunEntry.from_dict(json.loads(path.read_text(encoding="utf-8")))
                say(f"seed {seed}: {m.name} already done, skipping")
                result.entries.append(entry)
                continue
            key = (m.method.split("-")[0], m.objective_key())
            if key in done:
                prev, ckpt = done[key]
                entry = RunEntry(m.name, m.to_dict(), seed, prev.report, prev.error, prev.epochs)
            else:
                say(f"seed {seed}: training {m.name}")
                ckpt = None
                try:
                    ckpt, tlog = train_updated(cfg, data, m, seed, old, ref)
                    report = evaluate_update(old, ckpt, data.test, data.partition)
                    entry = RunEntry(m.name, m.to_dict(), seed, report, None, tlog.epochs)
                except Exception as exc:  # noqa: BLE001 - partial results are part of the contract
                    log.debug("run failed", exc_info=True)
                    entry = RunEntry(m.name, m.to_dict(), seed, error=f"{type(exc).__name__}: {exc}")
                done[key] = (entry, ckpt)
            if ckpt is not None:
                result.checkpoints[(seed, m.name)] = ckpt
                if ckdir is not None:
                    save_checkpoint(ckpt, ckdir / f"{_safe(m.name)}.ckpt")
            if path is not None:
                path.write_text(json.dumps(entry.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
            result.entries.append(entry)
    return result
