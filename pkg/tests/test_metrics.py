from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from higo.metrics import (EvalRecord, auprc, f1_fire, f1_scores, macro_f1, read_metrics_csv,
                          threshold_predictions, to_binary, write_metrics_csv)


def ap_oracle(scores, labels):
    """Rank-by-rank step integral sum (R_n - R_{n-1}) P_n, written as a plain loop."""
    idx = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(labels)
    tp, prev_r, ap = 0, Fraction(0), Fraction(0)
    for rank, i in enumerate(idx, start=1):
        tp += labels[i]
        r = Fraction(tp, n_pos)
        ap += (r - prev_r) * Fraction(tp, rank)
        prev_r = r
    return ap


# ---------------------------------------------------------------- F1

def test_macro_f1_examples():
    y = np.array([1, 0, 1, 0, 1, 0, 0, 0])
    assert macro_f1(y, y) == 1.0
    # TP=2 FP=1 FN=1 TN=4
    pred = np.array([1, 1, 1, 0, 0, 0, 0, 0])
    lab = np.array([1, 0, 1, 0, 1, 0, 0, 0])
    assert f1_scores(pred, lab) == (2 / 3, 4 / 5)
    assert macro_f1(pred, lab) == 11 / 15
    assert f1_fire(pred, lab) == 2 / 3
    assert macro_f1(np.zeros(5), np.zeros(5)) == 1.0


def test_zero_denominator_class_scores_zero():
    # no predicted fire but actual fire: fire F1 = 0, not undefined
    assert f1_fire(np.zeros(4), np.array([1, 0, 0, 0])) == 0.0


def test_macro_f1_shape_mismatch():
    with pytest.raises(ValueError):
        macro_f1(np.zeros(3), np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_macro_f1_swap_symmetry(pairs):
    p = np.array([a for a, _ in pairs])
    y = np.array([b for _, b in pairs])
    assert macro_f1(p, y) == macro_f1(1 - p, 1 - y)


def test_to_binary():
    np.testing.assert_array_equal(to_binary([0, 1, 2, 6, 0]), [0, 1, 1, 1, 0])


# ---------------------------------------------------------------- AP

def test_ap_hand_example():
    s, y = [0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]
    assert auprc(s, y, exact=True) == Fraction(5, 6)
    assert auprc(s, y) == pytest.approx(5 / 6, abs=1e-15)
    assert ap_oracle(s, y) == Fraction(5, 6)


def test_ap_on_records():
    recs = [EvalRecord(s, l, cell=i, time=0) for i, (s, l) in enumerate(zip([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]))]
    assert auprc(recs, exact=True) == Fraction(5, 6)


def test_record_validation():
    with pytest.raises(ValueError):
        EvalRecord(1.5, 1)
    with pytest.raises(ValueError):
        EvalRecord(0.5, 2)


def test_ap_perfect_and_absent():
    assert auprc([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0]) == 1.0
    assert auprc([0.3, 0.2], [0, 0]) is None


def test_ap_ties_keep_original_order():
    # all tied: ranking is the input order
    assert auprc([0.5] * 3, [0, 1, 0], exact=True) == Fraction(1, 2)
    assert auprc([0.5] * 3, [1, 0, 0], exact=True) == 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_ap_matches_loop_oracle(pairs):
    s = [a for a, _ in pairs]
    y = [b for _, b in pairs]
    if sum(y) == 0:
        assert auprc(s, y) is None
        return
    assert auprc(s, y, exact=True) == ap_oracle(s, y)
    assert auprc(s, y) == pytest.approx(float(ap_oracle(s, y)), abs=1e-12)


def test_ap_random_scores_near_prevalence():
    rng = np.random.default_rng(0)
    pi = 0.1
    aps = []
    for _ in range(10):
        y = (rng.random(10_000) < pi).astype(int)
        aps.append(auprc(rng.random(10_000), y))
    # per-trial std of AP at this size is ~0.005
    assert abs(np.mean(aps) - pi) < 0.01


def test_ap_monotone_invariance():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 50))
        s = rng.random(n)
        y = rng.integers(0, 2, n)
        if y.sum() == 0:
            y[0] = 1
        base = auprc(s, y, exact=True)
        for g in (np.sqrt, lambda v: v ** 3, lambda v: np.log1p(v) * 2 + 7):
            assert auprc(g(s), y, exact=True) == base


def test_ap_bounds():
    rng = np.random.default_rng(2)
    for _ in range(50):
        y = rng.integers(0, 2, 30)
        if y.sum() == 0:
            continue
        ap = auprc(rng.random(30), y)
        # the floor is the ranking with every positive last
        worst = float(ap_oracle([-i for i in range(30)], sorted(y.tolist())))
        assert worst - 1e-12 <= ap <= 1.0


# ---------------------------------------------------------------- thresholds / CSV

def test_threshold_examples():
    s = np.array([0.0, 0.2, 0.5, 0.9])
    assert threshold_predictions(s, 0.0).all()
    assert not threshold_predictions(s, np.nextafter(0.9, 1)).any()
    np.testing.assert_array_equal(threshold_predictions(s), [0, 0, 1, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotone(scores, a, b):
    lo, hi = min(a, b), max(a, b)
    assert np.all(threshold_predictions(scores, hi) <= threshold_predictions(scores, lo))


def test_metrics_csv_round_trip(tmp_path):
    rows = [("8", "m_f1", 0.7333333333333333), ("8", "auprc", None), ("16", "auprc", 0.25)]
    write_metrics_csv(tmp_path / "m.csv", rows)
    assert read_metrics_csv(tmp_path / "m.csv") == rows
