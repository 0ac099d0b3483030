"""Fold evaluation and report aggregation.

A fold report evaluates the checkpoint on its test fold across every
non-empty modality subset (each case masked to subset-intersect-available),
plus a smaller training-split section (full set and singletons), and
carries plot-ready ROC and Kaplan-Meier tables for the full-modality row.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import load_checkpoint, load_into_store
from .config import RunConfig
from .data import load_dataset
from .distill import powerset_nonempty
from .metrics import (SurvivalSample, classification_report, concordance_index,
                      kaplan_meier, logrank, roc_auc, stratify_by_median,
                      time_dependent_auc)
from .model import build_model, forward_subsets, predict_survival, tokenize_case
from .optim import rng_metadata
from .tokenize import MODALITIES, CaseRecord, ResponseLabel, hash_provider

_ORDER = {m: i for i, m in enumerate(MODALITIES)}
ALL_SUBSETS = powerset_nonempty(MODALITIES)
SMALL_SUBSETS = [frozenset({m}) for m in MODALITIES] + [frozenset(MODALITIES)]


def subset_name(s: frozenset) -> str:
    return "".join(sorted(s, key=_ORDER.__getitem__))


def _predict_cases(cases: list[CaseRecord], params, cfg: RunConfig,
                   subsets: list[frozenset], key_provider, gene_provider
                   ) -> dict[str, dict[str, float]]:
    """subset name -> case_id -> score (response prob of class 1, or risk)."""
    mcfg = cfg.model_config()
    out: dict[str, dict[str, float]] = {subset_name(s): {} for s in subsets}
    for case in cases:
        avail = case.availability
        masks = {}
        for s in subsets:
            m = frozenset(s & avail)
            if m:
                masks.setdefault(m, []).append(subset_name(s))
        if not masks:
            continue
        sets = tokenize_case(case, params, key_provider, gene_provider)
        preds = forward_subsets(sets, list(masks), params, mcfg)
        for m, names in masks.items():
            pred = preds[m]
            if cfg.task == "response":
                score = float(pred.probs[1])
            else:
                score = predict_survival(pred.logits.data).risk
            for name in names:
                out[name][case.case_id] = score
    return out


def _response_metrics(scores: dict[str, float], labels: dict[str, int]) -> dict:
    ids = sorted(scores)
    y = np.array([labels[i] for i in ids])
    p = np.array([scores[i] for i in ids])
    metrics: dict = {"n": len(ids)}
    if len(ids) and 0 < y.sum() < len(y):
        metrics["auc"] = roc_auc(p, y)
        metrics.update(classification_report(p, y))
    else:
        metrics["auc"] = None
    return metrics


def _survival_metrics(scores: dict[str, float], info: dict[str, tuple[float, bool]],
                      eval_times: list[float]) -> dict:
    ids = sorted(scores)
    samples = [SurvivalSample(risk=scores[i], time=info[i][0], event=info[i][1])
               for i in ids]
    metrics: dict = {"n": len(ids)}
    try:
        metrics["cindex"] = concordance_index(samples)
    except ValueError:
        metrics["cindex"] = None
    try:
        mean_auc, per_time = time_dependent_auc(samples, eval_times)
        metrics["td_auc"] = mean_auc
        metrics["td_auc_times"] = {repr(t): v for t, v in per_time.items()}
    except ValueError:
        metrics["td_auc"] = None
    return metrics


def roc_points(scores: np.ndarray, labels: np.ndarray) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) sweep, descending thresholds."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    pos = max(int(y.sum()), 1)
    neg = max(int((1 - y).sum()), 1)
    pts = [(math.inf, 0.0, 0.0)]
    tp = fp = 0
    for i in range(len(y)):
        tp += int(y[i] == 1)
        fp += int(y[i] == 0)
        if i + 1 < len(y) and s[i + 1] == s[i]:
            continue
        pts.append((float(s[i]), fp / neg, tp / pos))
    return pts


def evaluate_fold(cfg: RunConfig, fold: int, fold_assignment: dict[str, int],
                  checkpoint_path: str | Path,
                  cases: Optional[list[CaseRecord]] = None) -> dict:
    """Full report for one fold: metrics per modality subset on the test
    fold, full + singleton rows on the training split, KM/logrank and plot
    tables for the full-modality test row."""
    if cases is None:
        cases = load_dataset(cfg.dataset, cfg.task)
    arrays, header = load_checkpoint(checkpoint_path)
    mcfg = cfg.model_config()
    params, store = build_model(mcfg, seed=cfg.seed, trainable=False)
    load_into_store(arrays, store)
    kp = hash_provider("clinical-keys", cfg.embed_seed, cfg.d)
    gp = hash_provider("gene-names", cfg.embed_seed + 1, cfg.d)

    test_cases = [c for c in cases if fold_assignment[c.case_id] == fold]
    train_cases = [c for c in cases if fold_assignment[c.case_id] != fold]
    if not test_cases:
        raise ValueError(f"fold {fold} has no test cases")

    report: dict = {"fold": fold, "config": cfg.to_dict(),
                    "rng": rng_metadata(cfg.seed),
                    "checkpoint_extra": header.get("extra", {})}

    for section, sec_cases, subsets in (("test", test_cases, ALL_SUBSETS),
                                        ("train", train_cases, SMALL_SUBSETS)):
        scores = _predict_cases(sec_cases, params, cfg, subsets, kp, gp)
        sec: dict = {"n_cases": len(sec_cases), "subsets": {}}
        if cfg.task == "response":
            labels = {c.case_id: c.label.cls for c in sec_cases}
            for name, sc in scores.items():
                sec["subsets"][name] = _response_metrics(sc, labels)
        else:
            info = {c.case_id: (c.label.time_months, c.label.censor == 0)
                    for c in sec_cases}
            etimes = sorted(t for t, ev in info.values() if ev)
            eval_times = ([float(np.quantile(etimes, q)) for q in
                           np.linspace(0.1, 0.9, 9)] if etimes else [])
            sec["eval_times"] = eval_times
            for name, sc in scores.items():
                sec["subsets"][name] = _survival_metrics(sc, info, eval_times)
        full_name = subset_name(frozenset(MODALITIES))
        full_scores = scores[full_name]
        ids = sorted(full_scores)
        if section == "test":
            if cfg.task == "response":
                lab = {c.case_id: c.label.cls for c in sec_cases}
                y = np.array([lab[i] for i in ids])
                p = np.array([full_scores[i] for i in ids])
                sec["roc_points"] = [(repr(t), f, tpr) for t, f, tpr in roc_points(p, y)]
                sec["per_case"] = [{"case_id": i, "label": int(lab[i]),
                                    "prob": full_scores[i]} for i in ids]
            else:
                info = {c.case_id: (c.label.time_months, c.label.censor == 0)
                        for c in sec_cases}
                risks = np.array([full_scores[i] for i in ids])
                high = stratify_by_median(risks)
                groups = {"low": [SurvivalSample(risk=full_scores[i], time=info[i][0],
                                                 event=info[i][1])
                                  for i, h in zip(ids, high) if not h],
                          "high": [SurvivalSample(risk=full_scores[i], time=info[i][0],
                                                  event=info[i][1])
                                   for i, h in zip(ids, high) if h]}
                sec["km"] = {}
                for gname, gsamples in groups.items():
                    if gsamples:
                        curve = kaplan_meier(gsamples)
                        sec["km"][gname] = [(repr(t), s) for t, s in curve.steps()]
                if groups["low"] and groups["high"]:
                    chi2, p_val = logrank(groups["low"], groups["high"])
                    sec["logrank"] = {"chi2": chi2, "p": p_val}
                sec["per_case"] = [{"case_id": i, "time_months": info[i][0],
                                    "event": bool(info[i][1]), "risk": full_scores[i]}
                                   for i in ids]
        report[section] = sec
    return report


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")


def aggregate_reports(reports: list[dict]) -> dict:
    """Merge per-fold reports: per (section, subset, metric) the per-fold
    values, their mean, and the (population) standard deviation."""
    if not reports:
        raise ValueError("no reports to aggregate")
    agg: dict = {"n_folds": len(reports),
                 "config": reports[0].get("config", {}),
                 "sections": {}}
    for section in ("test", "train"):
        rows: dict = {}
        for rep in reports:
            sec = rep.get(section)
            if sec is None:
                continue
            for sub, metrics in sec["subsets"].items():
                for metric, value in metrics.items():
                    if not isinstance(value, (int, float)) or isinstance(value, bool):
                        continue
                    rows.setdefault(sub, {}).setdefault(metric, []).append(
                        (rep["fold"], float(value)))
        out_rows: dict = {}
        for sub, metrics in rows.items():
            out_rows[sub] = {}
            for metric, pairs in metrics.items():
                pairs.sort()
                vals = np.array([v for _, v in pairs])
                out_rows[sub][metric] = {
                    "per_fold": {str(f): v for f, v in pairs},
                    "mean": float(vals.mean()),
                    "std": float(vals.std()),
                }
        agg["sections"][section] = out_rows
    return agg
