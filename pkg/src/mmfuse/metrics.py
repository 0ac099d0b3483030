"""Evaluation metrics: ROC AUC, binary classification summary, survival
concordance, time-dependent AUC, Kaplan-Meier curves, the two-group logrank
test, and median risk stratification.

All pure functions over plain arrays / small dataclasses.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SurvivalSample:
    risk: float
    time: float           # months
    event: bool           # True = death observed

    def __post_init__(self):
        if not self.time > 0:
            raise ValueError(f"survival time must be positive, got {self.time}")


@dataclass
class KmCurve:
    """Product-limit survival estimate as a right-continuous step function."""

    times: np.ndarray       # distinct event times, ascending
    survival: np.ndarray    # S(t) just after each event time
    at_risk: np.ndarray     # n at risk at each event time
    events: np.ndarray      # deaths at each event time

    def steps(self) -> list[tuple[float, float]]:
        return [(0.0, 1.0)] + list(zip(self.times.tolist(), self.survival.tolist()))


def _ranks_with_ties(x: np.ndarray) -> np.ndarray:
    """Average ranks (1-based), ties share the mean rank."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: probability a random positive outranks a random
    negative, ties credited one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = len(labels) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("roc_auc requires both classes present")
    ranks = _ranks_with_ties(scores)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def classification_report(probs, labels, threshold: float = 0.5) -> dict:
    """Accuracy plus macro-averaged precision/recall/F1 at a probability
    threshold (prediction = 1 when prob >= threshold).

    Per-class precision/recall are defined as 0 when the denominator is
    empty; macro means average over the two classes.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pred = (probs >= threshold).astype(int)
    out = {"accuracy": float((pred == labels).mean())}
    precisions, recalls, f1s = [], [], []
    for cls in (0, 1):
        tp = int(((pred == cls) & (labels == cls)).sum())
        fp = int(((pred == cls) & (labels != cls)).sum())
        fn = int(((pred != cls) & (labels == cls)).sum())
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        precisions.append(p); recalls.append(r); f1s.append(f)
    out["precision"] = float(np.mean(precisions))
    out["recall"] = float(np.mean(recalls))
    out["f1"] = float(np.mean(f1s))
    return out


def concordance_index(samples: list[SurvivalSample]) -> float:
    """Fraction of comparable pairs ordered correctly by risk.

    Pair (i, j) is comparable when i has an observed event and time_i <
    time_j; concordant means risk_i > risk_j, risk ties count one half.
    """
    risk = np.array([s.risk for s in samples])
    time = np.array([s.time for s in samples])
    event = np.array([s.event for s in samples])
    idx = np.where(event)[0]
    comparable = 0
    score = 0.0
    for i in idx:
        later = time > time[i]
        comparable += int(later.sum())
        score += (risk[i] > risk[later]).sum() + 0.5 * (risk[i] == risk[later]).sum()
    if comparable == 0:
        raise ValueError("concordance_index: no comparable pair")
    return float(score / comparable)


def time_dependent_auc(samples: list[SurvivalSample], eval_times) -> tuple[float, dict]:
    """Cumulative/dynamic AUC: at horizon t, cases with an event by t are
    positives and cases still at risk beyond t are negatives; cases censored
    before t are excluded. Unweighted. Returns (mean over valid times,
    per-time values); undefined times are skipped with a warning.
    """
    risk = np.array([s.risk for s in samples])
    time = np.array([s.time for s in samples])
    event = np.array([s.event for s in samples])
    per_time: dict[float, float] = {}
    for t in eval_times:
        pos = event & (time <= t)
        neg = time > t
        if not pos.any() or not neg.any():
            warnings.warn(f"time-dependent AUC undefined at t={t}: skipped")
            continue
        sel = pos | neg
        per_time[float(t)] = roc_auc(risk[sel], pos[sel].astype(int))
    if not per_time:
        raise ValueError("time_dependent_auc: no valid evaluation time")
    return float(np.mean(list(per_time.values()))), per_time


def kaplan_meier(samples: list[SurvivalSample]) -> KmCurve:
    """Product-limit estimator S(t) = prod_{t_i <= t} (1 - d_i / n_i)."""
    if not samples:
        raise ValueError("kaplan_meier needs at least one sample")
    time = np.array([s.time for s in samples])
    event = np.array([s.event for s in samples])
    etimes = np.unique(time[event])
    surv, at_risk, deaths = [], [], []
    s = 1.0
    for t in etimes:
        n = int((time >= t).sum())
        d = int((event & (time == t)).sum())
        s *= 1.0 - d / n
        surv.append(s); at_risk.append(n); deaths.append(d)
    return KmCurve(times=etimes, survival=np.array(surv),
                   at_risk=np.array(at_risk, dtype=int),
                   events=np.array(deaths, dtype=int))


# ---------------------------------------------------------------------------
# chi-square tail via regularized incomplete gamma (series + continued
# fraction), so the logrank p-value needs no statistics library

def _gamma_p_series(a: float, x: float) -> float:
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(500):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x)."""
    if x < 0 or a <= 0:
        raise ValueError("gamma_q requires x >= 0 and a > 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_contfrac(a, x)


def chi2_sf(x: float, dof: int = 1) -> float:
    """Survival function of the chi-square distribution."""
    return gamma_q(dof / 2.0, x / 2.0)


def logrank(group_a: list[SurvivalSample], group_b: list[SurvivalSample]
            ) -> tuple[float, float]:
    """Two-group logrank test: chi-square statistic and p-value.

    Observed-minus-expected events in group A summed over pooled event
    times, with the hypergeometric variance; zero total variance (no events
    or no group contrast) yields p = 1 by convention.
    """
    if not group_a or not group_b:
        raise ValueError("logrank requires two non-empty groups")
    ta = np.array([s.time for s in group_a]); ea = np.array([s.event for s in group_a])
    tb = np.array([s.time for s in group_b]); eb = np.array([s.event for s in group_b])
    times = np.unique(np.concatenate([ta[ea], tb[eb]]))
    o_minus_e = 0.0
    var = 0.0
    for t in times:
        n1 = int((ta >= t).sum())
        n2 = int((tb >= t).sum())
        n = n1 + n2
        d1 = int((ea & (ta == t)).sum())
        d2 = int((eb & (tb == t)).sum())
        d = d1 + d2
        if n < 2 or d == 0:
            continue
        e1 = d * n1 / n
        o_minus_e += d1 - e1
        var += d * (n1 / n) * (1 - n1 / n) * (n - d) / (n - 1)
    if var <= 0:
        return 0.0, 1.0
    chi2 = o_minus_e * o_minus_e / var
    return float(chi2), float(chi2_sf(chi2, 1))


def stratify_by_median(risks) -> np.ndarray:
    """Median split; ties at the median go to the low-risk group.

    Returns a boolean array, True = high risk.
    """
    risks = np.asarray(risks, dtype=np.float64)
    if len(risks) < 2:
        raise ValueError("stratify_by_median needs at least 2 samples")
    return risks > np.median(risks)
