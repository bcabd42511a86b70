import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mptkit.mathcore import ContractError
from mptkit.metrics import (
    Outcome,
    UndefinedMetric,
    UpdateReport,
    build_update_report,
    classify_flip,
    error_rate,
    flip_counts,
    flip_records,
    logit_margin,
    negative_flip_rate,
    outcome_histogram,
    predict,
    relative_nfr,
)
from oracles import loop_flip_stats


def test_predict_examples():
    assert predict([0.1, 0.9]) == 1
    assert predict([0.5, 0.5]) == 0
    assert predict([-1.0, -3.0, -1.0]) == 0
    np.testing.assert_array_equal(predict([[0.1, 0.9], [0.5, 0.5]]), [1, 0])
    with pytest.raises(ContractError):
        predict([])


def test_logit_margin_examples():
    assert logit_margin([2.0, 0.5, -1.0], 0) == 1.5
    assert logit_margin([0.5, 2.0], 0) == -1.5
    with pytest.raises(ContractError):
        logit_margin([1.0], 0)
    with pytest.raises(ContractError):
        logit_margin([1.0, 2.0], 2)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=8), st.data())
def test_margin_shift_invariance_and_sign(z, data):
    y = data.draw(st.integers(0, len(z) - 1))
    c = data.draw(st.floats(-100, 100))
    g = logit_margin(z, y)
    assert abs(logit_margin(np.add(z, c), y) - g) < 1e-9
    if g > 0:
        assert predict(z) == y
    elif g < 0:
        assert predict(z) != y


def test_classify_flip_examples():
    assert classify_flip(2, 2, 7) is Outcome.NEGATIVE_FLIP
    assert classify_flip(2, 5, 2) is Outcome.POSITIVE_FLIP
    assert classify_flip(2, 2, 2) is Outcome.CONSISTENT_CORRECT
    assert classify_flip(2, 5, 7) is Outcome.CONSISTENT_WRONG


def test_nfr_examples():
    assert negative_flip_rate([0, 1, 2, 3], [0, 1, 2, 0], [0, 2, 2, 3]) == 0.25
    assert negative_flip_rate([0, 1, 2], [1, 2, 0], [2, 2, 2]) == 0.0
    with pytest.raises(ContractError):
        negative_flip_rate([0, 1], [0], [0, 1])
    with pytest.raises(ContractError):
        negative_flip_rate([], [], [])


def test_nfr_and_error_rate_match_loop_oracle():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 10, 200)
    a = np.where(rng.random(200) < 0.7, y, rng.integers(0, 10, 200))
    b = np.where(rng.random(200) < 0.7, y, rng.integers(0, 10, 200))
    ref = loop_flip_stats(y.tolist(), a.tolist(), b.tolist())
    assert negative_flip_rate(y, a, b) == ref["nfr"]
    assert error_rate(y, a) == ref["er_old"]
    assert error_rate(y, b) == ref["er_new"]
    assert flip_counts(y, a, b) == ref["counts"]


def test_relative_nfr_examples():
    assert relative_nfr(0.25, 0.25, 0.5) == pytest.approx(0.25 / 0.375)
    assert relative_nfr(0.0, 0.3, 0.2) == 0.0
    with pytest.raises(UndefinedMetric):
        relative_nfr(0.0, 1.0, 0.4)
    with pytest.raises(UndefinedMetric):
        relative_nfr(0.0, 0.2, 0.0)


def test_relative_nfr_reference_row():
    # mpmath, 30 digits: 0.0926 / ((1 - 0.3327) * 0.3432)
    value = relative_nfr(0.0926, 0.3327, 0.3432)
    assert value == pytest.approx(0.404336160367930187, abs=1e-12)
    assert abs(value - 0.4067) < 0.01


def test_error_rate_examples():
    assert error_rate([0, 1, 2], [0, 1, 2]) == 0.0
    assert error_rate([0, 1, 2], [1, 2, 0]) == 1.0
    assert error_rate([0, 1, 2, 3], [0, 0, 0, 0], subset={1, 2}) == 1.0
    assert error_rate([0, 1, 2, 3], [0, 0, 0, 0], subset=np.array([True, False, False, False])) == 0.0
    with pytest.raises(UndefinedMetric):
        error_rate([0, 1], [0, 1], subset={5})


triplets = st.integers(1, 60).flatmap(
    lambda n: st.tuples(*(st.lists(st.integers(0, 4), min_size=n, max_size=n) for _ in range(3)))
)


@settings(max_examples=150)
@given(triplets)
def test_outcome_partition_and_accounting(t):
    y, a, b = (np.array(v) for v in t)
    counts = flip_counts(y, a, b)
    assert sum(counts.values()) == len(y)
    old_acc = np.mean(a == y)
    nfr = negative_flip_rate(y, a, b)
    assert abs(nfr + counts["ConsistentCorrect"] / len(y) - old_acc) < 1e-12
    assert outcome_histogram(flip_records(y, a, b)) == counts


@settings(max_examples=150)
@given(triplets, st.randoms())
def test_metrics_invariant_to_reordering(t, rnd):
    y, a, b = (np.array(v) for v in t)
    perm = np.array(rnd.sample(range(len(y)), len(y)))
    assert negative_flip_rate(y, a, b) == negative_flip_rate(y[perm], a[perm], b[perm])
    assert error_rate(y, b) == error_rate(y[perm], b[perm])
    assert flip_counts(y, a, b) == flip_counts(y[perm], a[perm], b[perm])


@settings(max_examples=150)
@given(triplets)
def test_relative_nfr_bound(t):
    y, a, b = (np.array(v) for v in t)
    nfr = negative_flip_rate(y, a, b)
    er_base, er_new = error_rate(y, a), error_rate(y, b)
    try:
        rel = relative_nfr(nfr, er_base, er_new)
    except UndefinedMetric:
        return
    assert rel <= 1 / (1 - er_base) + 1e-12


def _report(seed=0, n=120, c=6):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, c, n)
    z = rng.normal(size=(n, c)) + 2.5 * np.eye(c)[y]
    mask = y < c // 2
    old_preds = np.where(rng.random(mask.sum()) < 0.8, y[mask], 0)
    return y, old_preds, z, mask


def test_update_report_fields_and_invariants():
    y, old_preds, z, mask = _report()
    r = build_update_report(y, old_preds, z, mask, keep_records=True)
    new_preds = predict(z)
    assert r.er_old_subset == error_rate(y[mask], new_preds[mask])
    assert r.er_all == error_rate(y, new_preds)
    assert r.nfr == negative_flip_rate(y[mask], old_preds, new_preds[mask])
    assert r.rel_nfr == pytest.approx(r.nfr / ((1 - r.er_basemodel) * r.er_old_subset))
    assert r.n_old_samples == len(r.records) == mask.sum()
    assert set(r.per_class_margins) == set(range(6))
    assert r.old_class_margin_mean == pytest.approx(np.mean(logit_margin(z, y)[mask]))
    r.check_invariants()


def test_update_report_round_trip():
    y, old_preds, z, mask = _report(1)
    r = build_update_report(y, old_preds, z, mask, keep_records=True)
    back = UpdateReport.from_dict(r.to_dict(include_records=True))
    assert back == r


def test_update_report_rel_nfr_absent_when_new_model_is_perfect():
    y = np.array([0, 1, 0, 1, 2])
    z = np.eye(3)[y] * 5
    r = build_update_report(y, np.array([0, 0, 0, 1]), z, y < 2)
    assert r.nfr == 0 and r.rel_nfr is None
    assert r.to_dict()["rel_nfr"] is None


def test_invariant_check_catches_inconsistency():
    y, old_preds, z, mask = _report(2)
    r = build_update_report(y, old_preds, z, mask)
    r.nfr = r.er_old_subset + 0.1
    with pytest.raises(AssertionError):
        r.check_invariants()
