import copy
import json

import numpy as np
import pytest

from mptkit.data import Dataset
from mptkit.losses import (
    ClassPartition,
    FocalDistillationConfig,
    MarginBias,
    MptObjectiveConfig,
    ReferenceOutputs,
    focal_distillation,
    mpt_objective,
)
from mptkit.mathcore import ArchSpec, MlpModel
from mptkit.metrics import predict
from mptkit.pipeline import (
    ROLE_STUDENT,
    CheckpointError,
    ConfigError,
    ModelCheckpoint,
    ScenarioConfig,
    evaluate_update,
    load_checkpoint,
    load_scenario_data,
    run_scenario,
    save_checkpoint,
    train_model,
    train_old,
    train_reference,
    train_updated,
)

BASE = {
    "name": "tiny",
    "dataset": {"kind": "blobs", "classes": 4, "n_train": 40, "n_test": 40, "radius": 3.0, "sigma": 0.3, "seed": 1},
    "model": {"hidden": [8], "embedding_dim": 4},
    "train": {"epochs": 4, "batch_size": 16, "base_lr": 0.02, "momentum": 0.9},
    "k": 2.0,
    "methods": [{"method": "NoTreatment"}, {"method": "PCT-KL"}, {"method": "MPT-KL"}],
    "seeds": [0],
}


def config(**overrides):
    raw = copy.deepcopy(BASE)
    raw.update(overrides)
    return ScenarioConfig.from_dict(raw)


@pytest.fixture(scope="module")
def shared():
    cfg = config()
    data = load_scenario_data(cfg)
    old, _ = train_old(cfg, data, 0)
    ref, _ = train_reference(cfg, data, 0)
    return cfg, data, old, ref


# ------------------------------------------------------------------ config


def test_config_defaults_and_method_fill():
    cfg = config()
    assert cfg.method("MPT-KL").k == 2.0 and cfg.method("MPT-KL").lam == 1.0
    assert cfg.method("PCT-KL").k == 0.0 and cfg.method("PCT-KL").lam == 1.0
    assert cfg.method("NoTreatment").lam == 0.0
    assert ScenarioConfig.from_dict({"name": "d", "methods": [{"method": "NoTreatment"}]}).train.epochs == 100
    assert ScenarioConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_lm_default_lambda():
    cfg = config(methods=[{"method": "MPT-LM"}, {"method": "PCT-LM"}])
    assert cfg.method("MPT-LM").lam == 0.4 and cfg.method("PCT-LM").lam == 0.4
    cfg = config(methods=[{"method": "MPT-LM"}], **{"lambda": {"LM": 0.1}})
    assert cfg.method("MPT-LM").lam == 0.1


@pytest.mark.parametrize(
    "entry",
    [
        {"method": "PCT-KL", "k": 1.0},
        {"method": "NoTreatment", "lambda": 0.5},
        {"method": "NoTreatment", "k": 1.0},
        {"method": "MPT-NoBias", "k": 2.0},
        {"method": "MPT-NoDistill", "lambda": 1.0},
        {"method": "MPT-XL"},
    ],
)
def test_method_constraints_rejected(entry):
    with pytest.raises(ConfigError):
        config(methods=[entry])


def test_config_error_lists_every_problem():
    with pytest.raises(ConfigError) as info:
        config(methods=[{"method": "PCT-KL", "k": 1.0}, {"method": "NoTreatment", "lambda": 2.0}], seeds=[])
    assert len(info.value.errors) >= 3


def test_sweep_expands_into_labelled_runs():
    cfg = config(methods=[], sweep={"method": "MPT-KL", "k": [0, 1, 2, 4, 8]})
    assert [m.name for m in cfg.methods] == [f"MPT-KL@k={k}" for k in (0, 1, 2, 4, 8)]
    assert [m.k for m in cfg.methods] == [0, 1, 2, 4, 8]


# ------------------------------------------------------------------ training


def test_zero_epochs_returns_initialisation():
    cfg = config(train={"epochs": 0})
    data = load_scenario_data(cfg)
    ckpt, log = train_old(cfg, data, 3)
    init = MlpModel.init(ckpt.arch, np.random.SeedSequence([3, 0, 0]))
    for a, b in zip(ckpt.model.params(), init.params()):
        np.testing.assert_array_equal(a, b)
    assert log.step_losses == []


def test_same_seed_gives_identical_checkpoints(shared, tmp_path):
    cfg, data, old, _ = shared
    again, _ = train_old(cfg, data, 0)
    save_checkpoint(old, tmp_path / "a.ckpt")
    save_checkpoint(again, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_old_model_learns_well_separated_blobs():
    cfg = config(train={"epochs": 15, "batch_size": 16, "base_lr": 0.05})
    data = load_scenario_data(cfg)
    old, _ = train_old(cfg, data, 0)
    assert old.class_map == (0, 1)
    report = evaluate_update(old, old, data.test, data.partition)
    assert report.er_basemodel < 0.05


def test_reference_beats_old_model_on_all_classes(shared):
    cfg, data, old, ref = shared
    assert ref.arch == train_updated(cfg, data, cfg.method("NoTreatment"), 0, old)[0].arch
    full = evaluate_update(old, ref, data.test, data.partition).er_all
    old_only = evaluate_update(old, old, data.test, data.partition).er_all
    assert old_only >= 0.5
    assert full < old_only


def test_zero_bias_zero_lambda_matches_no_treatment_step_by_step(shared):
    cfg, data, old, ref = shared
    degenerate = config(methods=[{"method": "MPT-KL", "k": 0, "lambda": 0}]).methods[0]
    _, a = train_updated(cfg, data, cfg.method("NoTreatment"), 0, old, ref)
    _, b = train_updated(cfg, data, degenerate, 0, old, ref)
    assert len(a.step_losses) == len(b.step_losses) > 0
    assert np.max(np.abs(np.subtract(a.step_losses, b.step_losses))) <= 1e-12


def test_pct_is_mpt_without_the_reference_term(shared):
    cfg, data, old, ref = shared
    part = data.partition
    pct = cfg.method("PCT-KL")
    _, a = train_updated(cfg, data, pct, 0, old, ref)

    focal = FocalDistillationConfig(cfg.focal.alpha, cfg.focal.beta, "KL", cfg.focal.temperature)
    obj = MptObjectiveConfig(MarginBias(0.0, part), pct.lam, focal)

    def full_minus_new(xb, logits, yb):
        zo = old.logits(xb)
        old_out = ReferenceOutputs(zo, np.asarray(old.class_map)[predict(zo)], part.old_classes)
        zr = ref.logits(xb)
        total, grad, _ = mpt_objective(logits, yb, old_out, ReferenceOutputs(zr, predict(zr)), obj)
        fd_new, g_new = focal_distillation(logits, zr, predict(zr), yb, focal)
        return total - pct.lam * fd_new, grad - pct.lam * g_new, {}

    arch = ArchSpec(data.train.dim, cfg.hidden, cfg.embedding_dim, part.class_count)
    _, b = train_model(arch, data.train.features, data.train.labels, full_minus_new, cfg.train, 0, ROLE_STUDENT)
    assert np.max(np.abs(np.subtract(a.step_losses, b.step_losses))) <= 1e-12


def test_epoch_terms_sum_to_total(shared):
    cfg, data, old, ref = shared
    m = cfg.method("MPT-KL")
    _, log = train_updated(cfg, data, m, 0, old, ref)
    assert len(log.epochs) == cfg.train.epochs
    for e in log.epochs:
        assert abs(e["ce"] + m.lam * e["fd_old"] + m.lam * e["fd_new"] - e["total"]) < 1e-9


def test_missing_checkpoints_are_configuration_errors(shared):
    cfg, data, old, _ = shared
    with pytest.raises(ConfigError):
        train_updated(cfg, data, cfg.method("MPT-KL"), 0, old, None)
    with pytest.raises(ConfigError):
        train_updated(cfg, data, cfg.method("PCT-KL"), 0, None, None)
    # plain CE needs neither
    train_updated(config(train={"epochs": 1}), data, cfg.method("NoTreatment"), 0, None, None)


# ------------------------------------------------------------------ evaluation


def test_old_model_against_itself_has_no_negative_flips(shared):
    _, data, old, _ = shared
    r = evaluate_update(old, old, data.test, data.partition, keep_records=True)
    assert r.nfr == 0.0
    assert r.er_old_subset == r.er_basemodel
    assert len(r.records) == r.n_old_samples
    assert set(r.per_class_margins) == set(data.partition.old_classes)
    json.dumps(r.to_dict(include_records=True), allow_nan=False)


def test_random_logit_model_nfr_matches_expectation(shared):
    _, data, old, _ = shared
    rng = np.random.default_rng(0)
    n, c = 20000, data.partition.class_count
    test = Dataset(rng.normal(size=(n, data.train.dim)) * 3, rng.integers(0, c, n), c, "test")

    class RandomLogits(ModelCheckpoint):
        def logits(self, features):
            return rng.normal(size=(len(features), c))

    arch = ArchSpec(data.train.dim, (), c, c)
    noisy = RandomLogits(MlpModel.init(arch, 0), tuple(range(c)), "", 0, 0)
    r = evaluate_update(old, noisy, test, data.partition)
    expected = (1 - r.er_basemodel) * (1 - 1 / c)
    assert abs(r.nfr - expected) <= 0.05 * expected


def test_evaluate_does_not_mutate_checkpoints(shared):
    _, data, old, ref = shared
    probe = data.test.features[:10]
    before = (old.logits(probe).copy(), ref.logits(probe).copy())
    evaluate_update(old, ref, data.test, data.partition, keep_records=True)
    np.testing.assert_array_equal(old.logits(probe), before[0])
    np.testing.assert_array_equal(ref.logits(probe), before[1])


def test_evaluate_rejects_mismatched_partition(shared):
    _, data, old, ref = shared
    with pytest.raises(ValueError):
        evaluate_update(ref, ref, data.test, data.partition)
    with pytest.raises(ValueError):
        evaluate_update(old, ref, data.test, ClassPartition((0, 1, 2), (3,)))


# ------------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip(shared, tmp_path):
    _, data, old, _ = shared
    path = tmp_path / "old.ckpt"
    save_checkpoint(old, path)
    back = load_checkpoint(path, expected_arch=old.arch)
    probe = data.test.features[:16]
    np.testing.assert_array_equal(back.logits(probe), old.logits(probe))
    assert (back.class_map, back.config_digest, back.seed, back.epochs, back.label) == (
        old.class_map,
        old.config_digest,
        old.seed,
        old.epochs,
        old.label,
    )


def test_checkpoint_corruption_is_detected(shared, tmp_path):
    _, _, old, _ = shared
    path = tmp_path / "old.ckpt"
    save_checkpoint(old, path)
    blob = path.read_bytes()

    (tmp_path / "short.ckpt").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path / "short.ckpt")

    flipped = bytearray(blob)
    flipped[-40] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "flip.ckpt")

    (tmp_path / "magic.ckpt").write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")

    versioned = bytearray(blob)
    versioned[8] = 9
    (tmp_path / "v.ckpt").write_bytes(bytes(versioned))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")


def test_checkpoint_architecture_mismatch_refused(shared, tmp_path):
    _, _, old, _ = shared
    path = tmp_path / "old.ckpt"
    save_checkpoint(old, path)
    with pytest.raises(CheckpointError, match="architecture"):
        load_checkpoint(path, expected_arch=ArchSpec(2, (16,), 4, 2))


# ------------------------------------------------------------------ scenarios


def test_run_scenario_seeds_and_sweep(tmp_path):
    cfg = config(
        train={"epochs": 2, "batch_size": 32, "base_lr": 0.02},
        methods=[{"method": "NoTreatment"}],
        sweep={"method": "MPT-KL", "k": [0, 1, 2, 4, 8]},
        seeds=[0, 1],
    )
    result = run_scenario(cfg, tmp_path, progress=lambda _m: None)
    labels = [m.name for m in cfg.methods]
    assert len(result.entries) == len(labels) * 2
    for label in labels:
        assert len(result.entries_for(label)) == 2
    for seed in (0, 1):
        assert (tmp_path / "checkpoints" / f"seed{seed}" / "old.ckpt").exists()
        assert (tmp_path / "checkpoints" / f"seed{seed}" / "reference.ckpt").exists()
    for e in result.entries:
        assert e.error is None
        e.report.check_invariants()
    files = sorted(p.name for p in (tmp_path / "runs").iterdir())
    assert "MPT-KL_at_k4__seed1.json" in files and len(files) == 12


def test_run_scenario_is_deterministic(tmp_path):
    cfg = config(train={"epochs": 2, "batch_size": 32, "base_lr": 0.02}, seeds=[0, 1])
    a = run_scenario(cfg, tmp_path / "a", progress=lambda _m: None)
    b = run_scenario(cfg, tmp_path / "b", progress=lambda _m: None)
    assert [e.to_dict() for e in a.entries] == [e.to_dict() for e in b.entries]
    for f in sorted((tmp_path / "a").rglob("*.*")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_resume_skips_finished_runs(tmp_path):
    cfg = config(train={"epochs": 2, "batch_size": 32, "base_lr": 0.02})
    first = run_scenario(cfg, tmp_path, progress=lambda _m: None)
    marker = tmp_path / "runs" / "MPT-KL__seed0.json"
    doc = json.loads(marker.read_text())
    doc["report"]["nfr"] = 0.123
    marker.write_text(json.dumps(doc))
    messages = []
    second = run_scenario(cfg, tmp_path, resume=True, progress=messages.append)
    assert not any("training" in m for m in messages)
    assert second.entries_for("MPT-KL")[0].report.nfr == 0.123
    assert second.entries_for("PCT-KL")[0].to_dict() == first.entries_for("PCT-KL")[0].to_dict()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_failed_runs_become_failure_entries():
    cfg = config(train={"epochs": 3, "batch_size": 16, "base_lr": 1e6})
    result = run_scenario(cfg, None, progress=lambda _m: None)
    assert result.entries and all(e.error for e in result.entries)
    assert all(e.to_dict()["status"] == "failed" for e in result.entries)
