import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfuse.metrics import (KmCurve, SurvivalSample, chi2_sf, classification_report,
                            concordance_index, gamma_q, kaplan_meier, logrank,
                            roc_auc, stratify_by_median, time_dependent_auc)


# ---------------------------------------------------------------------------
# brute-force oracles (independent of the implementations they check)

def auc_bruteforce(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def cindex_bruteforce(samples):
    num = 0.0
    den = 0
    for i, a in enumerate(samples):
        for j, b in enumerate(samples):
            if i == j or not a.event or not (a.time < b.time):
                continue
            den += 1
            num += 1.0 if a.risk > b.risk else (0.5 if a.risk == b.risk else 0.0)
    return num / den


def km_bruteforce(samples):
    times = sorted({s.time for s in samples if s.event})
    out = []
    surv = 1.0
    for t in times:
        n = sum(1 for s in samples if s.time >= t)
        d = sum(1 for s in samples if s.event and s.time == t)
        surv *= 1 - d / n
        out.append((t, surv))
    return out


# ---------------------------------------------------------------------------
# ROC AUC

def test_auc_perfect_and_inverted():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_auc_hand_case():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_single_class_rejected():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


@pytest.mark.parametrize("seed", range(12))
def test_auc_matches_bruteforce_with_ties(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 12))
    scores = np.round(rng.random(n), 1)  # coarse grid forces ties
    labels = rng.integers(0, 2, n)
    if labels.sum() in (0, n):
        labels[0] = 1 - labels[0]
    assert abs(roc_auc(scores, labels) - auc_bruteforce(scores, labels)) < 1e-12


def test_auc_monotone_transform_invariant(rng):
    scores = rng.random(20)
    labels = rng.integers(0, 2, 20)
    labels[0], labels[1] = 0, 1
    a = roc_auc(scores, labels)
    b = roc_auc(np.exp(3 * scores), labels)
    assert abs(a - b) < 1e-15


# ---------------------------------------------------------------------------
# classification report

def test_report_all_correct():
    rep = classification_report([0.9, 0.8, 0.1], [1, 1, 0])
    assert rep == {"accuracy": 1.0, "precision": 1.0, "recall": 1.0, "f1": 1.0}


def test_report_all_positive_balanced():
    rep = classification_report([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    assert rep["accuracy"] == 0.5


def test_report_hand_confusion_matrix():
    # 3 TP, 1 FP, 1 FN, 3 TN (positive class = 1)
    probs = [0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1]
    labels = [1, 1, 1, 0, 1, 0, 0, 0]
    rep = classification_report(probs, labels)
    # class 1: P = 3/4, R = 3/4, F1 = 3/4; class 0: P = 3/4, R = 3/4, F1 = 3/4
    assert rep["accuracy"] == 0.75
    assert abs(rep["precision"] - 0.75) < 1e-12
    assert abs(rep["recall"] - 0.75) < 1e-12
    assert abs(rep["f1"] - 0.75) < 1e-12


def test_report_degenerate_denominators():
    rep = classification_report([0.9, 0.9], [0, 0])
    assert rep["accuracy"] == 0.0
    assert 0.0 <= rep["precision"] <= 1.0


# ---------------------------------------------------------------------------
# concordance index

def _samples(risks, times, events):
    return [SurvivalSample(risk=r, time=t, event=bool(e))
            for r, t, e in zip(risks, times, events)]


def test_cindex_perfect_antiordering():
    s = _samples([4, 3, 2, 1], [1, 2, 3, 4], [1, 1, 1, 1])
    assert concordance_index(s) == 1.0


def test_cindex_all_ties():
    s = _samples([1, 1, 1], [1, 2, 3], [1, 1, 1])
    assert concordance_index(s) == 0.5


def test_cindex_mixed_censoring_hand_case():
    s = _samples([3.0, 1.0, 2.0, 0.5], [2, 4, 6, 8], [1, 0, 1, 0])
    assert abs(concordance_index(s) - cindex_bruteforce(s)) < 1e-15


@pytest.mark.parametrize("seed", range(12))
def test_cindex_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 12))
    s = _samples(np.round(rng.random(n), 1), rng.integers(1, 6, n).astype(float),
                 rng.integers(0, 2, n))
    if not any(x.event for x in s):
        s[0].event = True
    try:
        expected = cindex_bruteforce(s)
    except ZeroDivisionError:
        with pytest.raises(ValueError):
            concordance_index(s)
        return
    assert abs(concordance_index(s) - expected) < 1e-12


def test_cindex_risk_equals_negative_time():
    rng = np.random.default_rng(5)
    times = rng.uniform(1, 50, 10)
    s = _samples(-times, times, np.ones(10))
    assert concordance_index(s) == 1.0


def test_cindex_no_comparable_pairs_rejected():
    s = _samples([1, 2], [5, 5], [0, 0])
    with pytest.raises(ValueError):
        concordance_index(s)


# ---------------------------------------------------------------------------
# time-dependent AUC

def test_td_auc_perfect_ordering():
    times = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    s = _samples(-times, times, np.ones(6))
    mean, per = time_dependent_auc(s, [2.5, 4.5])
    assert mean == 1.0 and all(v == 1.0 for v in per.values())


def test_td_auc_skips_undefined_times():
    s = _samples([1, 2, 3], [1, 2, 3], [1, 1, 1])
    with pytest.warns(UserWarning):
        mean, per = time_dependent_auc(s, [10.0, 1.5])  # no survivors past 10
    assert list(per) == [1.5]


def test_td_auc_hand_case_at_t12():
    # 5 samples, horizon 12: positives = events by 12, negatives = survivors
    s = _samples([2.0, 1.5, 0.5, 1.0, 0.1],
                 [6.0, 10.0, 14.0, 20.0, 30.0],
                 [1, 1, 0, 0, 0])
    mean, per = time_dependent_auc(s, [12.0])
    # positives: risks {2.0, 1.5}; negatives: {0.5, 1.0, 0.1} -> all 6 pairs ordered
    assert per[12.0] == 1.0
    s[0].risk = 0.2  # now one positive ranks below two negatives
    _, per = time_dependent_auc(s, [12.0])
    assert abs(per[12.0] - auc_bruteforce([0.2, 1.5, 0.5, 1.0, 0.1],
                                          [1, 1, 0, 0, 0])) < 1e-12


def test_td_auc_equals_roc_auc_single_time_no_censoring():
    rng = np.random.default_rng(3)
    risks = rng.random(12)
    times = np.where(rng.integers(0, 2, 12) == 1, 5.0, 20.0)
    s = _samples(risks, times, np.ones(12))
    labels = (times <= 10).astype(int)
    mean, _ = time_dependent_auc(s, [10.0])
    assert abs(mean - roc_auc(risks, labels)) < 1e-12


def test_td_auc_no_valid_times_rejected():
    s = _samples([1, 2], [5, 6], [0, 0])
    with pytest.raises(ValueError):
        with pytest.warns(UserWarning):
            time_dependent_auc(s, [1.0])


# ---------------------------------------------------------------------------
# Kaplan-Meier

def test_km_no_events_flat():
    s = _samples([1, 2, 3], [4, 5, 6], [0, 0, 0])
    curve = kaplan_meier(s)
    assert len(curve.times) == 0
    assert curve.steps() == [(0.0, 1.0)]


def test_km_all_die_at_five():
    s = _samples([1, 2, 3], [5, 5, 5], [1, 1, 1])
    curve = kaplan_meier(s)
    assert curve.times.tolist() == [5.0]
    assert curve.survival.tolist() == [0.0]
    assert curve.at_risk.tolist() == [3]


def test_km_hand_life_table():
    # times [1, 2+, 3]: S = 2/3 after t=1, then 0 after t=3
    s = _samples([0, 0, 0], [1, 2, 3], [1, 0, 1])
    curve = kaplan_meier(s)
    assert curve.times.tolist() == [1.0, 3.0]
    assert np.allclose(curve.survival, [2 / 3, 0.0])


@pytest.mark.parametrize("seed", range(10))
def test_km_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 12))
    s = _samples(np.zeros(n), rng.integers(1, 6, n).astype(float),
                 rng.integers(0, 2, n))
    curve = kaplan_meier(s)
    expected = km_bruteforce(s)
    assert len(curve.times) == len(expected)
    for (t, sv), ct, cs in zip(expected, curve.times, curve.survival):
        assert t == ct and abs(sv - cs) < 1e-12


def test_km_no_censoring_equals_empirical():
    rng = np.random.default_rng(1)
    times = rng.integers(1, 20, 15).astype(float)
    s = _samples(np.zeros(15), times, np.ones(15))
    curve = kaplan_meier(s)
    for t, sv in zip(curve.times, curve.survival):
        assert abs(sv - (times > t).mean()) < 1e-12


def test_km_monotone_in_unit_interval(rng):
    s = _samples(np.zeros(30), rng.uniform(1, 40, 30), rng.integers(0, 2, 30))
    curve = kaplan_meier(s)
    vals = [1.0] + curve.survival.tolist()
    assert all(1 >= a >= b >= 0 for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# logrank test

def test_logrank_identical_groups():
    g = _samples([0] * 4, [1, 2, 3, 4], [1, 1, 0, 1])
    chi2, p = logrank(g, list(g))
    assert chi2 == 0.0 and p == 1.0


def test_logrank_no_events_convention():
    a = _samples([0, 0], [1, 2], [0, 0])
    b = _samples([0, 0], [3, 4], [0, 0])
    chi2, p = logrank(a, b)
    assert chi2 == 0.0 and p == 1.0


def test_logrank_textbook_life_table():
    # classic two-group example: group A events at 1,2; group B events at 4,5
    a = _samples([0] * 3, [1.0, 2.0, 3.0], [1, 1, 0])
    b = _samples([0] * 3, [4.0, 5.0, 6.0], [1, 1, 0])
    chi2, p = logrank(a, b)
    # hand life table:
    # t=1: n1=3,n2=3,d=1 -> e1=0.5, v=0.25
    # t=2: n1=2,n2=3,d=1 -> e1=0.4, v=0.24
    # t=4: n1=0,n2=3,d=1 -> e1=0,   v=0
    # t=5: n1=0,n2=2,d=1 -> e1=0,   v=0
    # O1-E1 = 2-0.9 = 1.1, V = 0.49, chi2 = 1.1^2/0.49
    expected_chi2 = 1.1 ** 2 / 0.49
    assert abs(chi2 - expected_chi2) < 1e-12
    assert abs(p - chi2_sf(expected_chi2, 1)) < 1e-15
    assert 0.0 < p < 0.2


def test_logrank_nonnegative_and_detects_separation(rng):
    a = _samples(np.zeros(20), rng.uniform(1, 10, 20), np.ones(20))
    b = _samples(np.zeros(20), rng.uniform(30, 50, 20), np.ones(20))
    chi2, p = logrank(a, b)
    assert chi2 > 10 and p < 1e-3


def test_logrank_bootstrap_self_comparison():
    # halves of one group should rarely separate
    rng = np.random.default_rng(7)
    times = rng.uniform(1, 40, 40)
    events = rng.integers(0, 2, 40)
    fails = 0
    for trial in range(100):
        perm = rng.permutation(40)
        ga = _samples(np.zeros(20), times[perm[:20]], events[perm[:20]])
        gb = _samples(np.zeros(20), times[perm[20:]], events[perm[20:]])
        _, p = logrank(ga, gb)
        if p <= 0.05:
            fails += 1
    assert fails <= 10


def test_logrank_empty_group_rejected():
    with pytest.raises(ValueError):
        logrank([], _samples([0], [1], [1]))


# ---------------------------------------------------------------------------
# chi-square tail (continued-fraction incomplete gamma) vs scipy oracle

@pytest.mark.parametrize("x", [0.0, 0.1, 0.5, 1.0, 2.5, 3.84, 10.0, 30.0])
def test_chi2_sf_matches_scipy(x):
    from scipy.stats import chi2 as scipy_chi2
    assert abs(chi2_sf(x, 1) - scipy_chi2.sf(x, 1)) < 1e-12


def test_gamma_q_validation():
    with pytest.raises(ValueError):
        gamma_q(0.0, 1.0)
    with pytest.raises(ValueError):
        gamma_q(1.0, -1.0)
    assert gamma_q(0.5, 0.0) == 1.0


# ---------------------------------------------------------------------------
# stratification

def test_stratify_even():
    high = stratify_by_median([1.0, 2.0, 3.0, 4.0])
    assert high.tolist() == [False, False, True, True]


def test_stratify_all_equal_goes_low():
    assert not stratify_by_median([2.0, 2.0, 2.0]).any()


def test_stratify_odd_median_goes_low():
    assert stratify_by_median([1.0, 2.0, 3.0]).tolist() == [False, False, True]


def test_stratify_needs_two():
    with pytest.raises(ValueError):
        stratify_by_median([1.0])
