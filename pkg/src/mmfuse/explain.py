"""Interpretability: integrated gradients over clinical record values, and
token saliency from cross-modal attention maps.

Attribution targets: for the response task the log-probability of the
predicted class; for survival the scalar risk. The integration path
perturbs clinical values only (record-name embeddings stay fixed), from an
all-zero-value baseline to the observed values, midpoint rule.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (ModelConfig, ModelParams, Prediction, forward, survival_risk,
                    tokenize_case)
from .tokenize import MODALITIES, CaseRecord, EmbeddingProvider, TokenSet, tokenize_clinical


@dataclass
class Attribution:
    """Per-record contribution of clinical values to the model target."""

    case_id: str
    records: list[tuple[str, float]]       # (key, contribution)
    target: str                            # "log_prob_class_k" or "risk"
    steps: int
    baseline: str
    value: float                           # F(x)
    baseline_value: float                  # F(baseline)
    completeness_residual: float           # |sum - (F(x) - F(baseline))|

    def as_dict(self) -> dict:
        return {"case_id": self.case_id, "target": self.target, "steps": self.steps,
                "baseline": self.baseline, "value": self.value,
                "baseline_value": self.baseline_value,
                "completeness_residual": self.completeness_residual,
                "records": [{"key": k, "contribution": c} for k, c in self.records]}


@dataclass
class TokenSaliency:
    modality: str
    scores: np.ndarray          # sums to 1
    source_ids: list[str]

    def top_k(self, k: int) -> list[tuple[str, float, int]]:
        """(source_id, score, rank) rows, descending score, ties broken by
        source id; rank is 1-based and strictly increasing."""
        if k > len(self.scores):
            raise ValueError(f"top_k {k} exceeds {len(self.scores)} tokens")
        order = sorted(range(len(self.scores)),
                       key=lambda i: (-self.scores[i], self.source_ids[i]))
        return [(self.source_ids[i], float(self.scores[i]), r + 1)
                for r, i in enumerate(order[:k])]


def path_integral_gradients(f: Callable[[Tensor], Tensor], x: np.ndarray,
                            baseline: np.ndarray, steps: int) -> tuple[np.ndarray, float, float]:
    """Integrated gradients of a scalar-valued differentiable `f` along the
    straight line from `baseline` to `x`, midpoint Riemann rule.

    Returns (attributions, f(x), f(baseline)).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise ValueError("baseline shape must match input shape")
    diff = x - baseline
    acc = np.zeros_like(x)
    for s in range(1, steps + 1):
        alpha = (s - 0.5) / steps
        leaf = Tensor(baseline + alpha * diff, requires_grad=True)
        leaf.grad = np.zeros_like(x)
        out = f(leaf)
        out.backward()
        acc += leaf.grad
    fx = float(f(Tensor(x)).data)
    fb = float(f(Tensor(baseline)).data)
    return diff * (acc / steps), fx, fb


def _clinical_target_fn(case: CaseRecord, params: ModelParams, cfg: ModelConfig,
                        key_provider: EmbeddingProvider, gene_provider: EmbeddingProvider
                        ) -> tuple[Callable[[Tensor], Tensor], str]:
    """Builds F(values) with every non-clinical modality fixed, plus the
    target description."""
    if not case.clinical:
        raise ValueError(f"case {case.case_id}: clinical modality absent")
    keys = [k for k, _ in case.clinical]
    key_mat = Tensor(np.stack([key_provider(k) for k in keys]))
    base_sets = tokenize_case(case, params, key_provider, gene_provider)

    target_cls: Optional[int] = None
    if cfg.task == "response":
        pred0 = forward(base_sets, params, cfg)
        target_cls = int(np.argmax(pred0.probs))
        target_name = f"log_prob_class_{target_cls}"
    else:
        target_name = "risk"

    def f(values: Tensor) -> Tensor:
        col = ad.reshape(values, (len(keys), 1))
        tokens = ad.add(key_mat, ad.linear(col, params.clin_value.w, params.clin_value.b))
        sets = dict(base_sets)
        sets["C"] = TokenSet("C", tokens, ordered=False, source_ids=keys)
        pred = forward(sets, params, cfg)
        if cfg.task == "response":
            return ad.take(ad.log_softmax(pred.logits), target_cls)
        return survival_risk(pred.logits)

    return f, target_name


def integrated_gradients(case: CaseRecord, params: ModelParams, cfg: ModelConfig,
                         key_provider: EmbeddingProvider, gene_provider: EmbeddingProvider,
                         steps: int = 64) -> Attribution:
    """Attribute the model target to each clinical record's value.

    Baseline: all clinical values zero. IG_i integrates dF/dv_i along the
    straight-line path (midpoint rule) and multiplies by (v_i - 0).
    """
    if steps < 16:
        raise ValueError("integrated_gradients requires steps >= 16")
    f, target_name = _clinical_target_fn(case, params, cfg, key_provider, gene_provider)
    keys = [k for k, _ in case.clinical]
    values = np.array([v for _, v in case.clinical])
    attr, fx, fb = path_integral_gradients(f, values, np.zeros_like(values), steps)
    residual = abs(attr.sum() - (fx - fb))
    return Attribution(case_id=case.case_id, records=list(zip(keys, attr.tolist())),
                       target=target_name, steps=steps, baseline="zero_values",
                       value=fx, baseline_value=fb, completeness_residual=float(residual))


def token_saliency(prediction: Prediction, modality: str) -> TokenSaliency:
    """Per-token importance for one modality: mean over layers, heads, and
    querying modalities of the cross-modal attention weight its tokens
    received as context keys, renormalized to sum to one."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality}")
    if not prediction.attn:
        raise ValueError("prediction carries no attention intermediates "
                         "(forward with capture=True)")
    sources: Optional[list[str]] = None
    for (layer, m, role), rec in prediction.attn.items():
        if role == "unimodal" and m == modality:
            sources = rec["sources"]
            break
    if sources is None:
        raise ValueError(f"modality {modality} was not present in the forward pass")
    weight_rows = []
    for (layer, qmod, role), rec in sorted(prediction.attn.items(),
                                           key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        if role != "cross" or qmod == modality:
            continue
        offset = 0
        for seg_mod, count in rec["segments"]:
            if seg_mod == modality:
                maps = rec["maps"]  # (heads, 1, n_ctx)
                weight_rows.append(maps[:, 0, offset:offset + count])
            offset += count
    if not weight_rows:
        raise ValueError(f"no cross-modal attention recorded over modality {modality}")
    stacked = np.concatenate(weight_rows, axis=0)   # (layers*heads*queries, n_tokens)
    mean = stacked.mean(axis=0)
    total = mean.sum()
    if total <= 0:
        raise ValueError("degenerate attention mass")
    scores = mean / total
    if len(scores) != len(sources):
        raise ValueError("attention map width does not match token count")
    return TokenSaliency(modality=modality, scores=scores, source_ids=sources)


def export_saliency(saliencies: list[tuple[str, TokenSaliency]], top_k: int,
                    writer) -> None:
    """Write (case_id, modality, source_id, score, rank) CSV rows, one block
    per saliency, scores descending."""
    out = csv.writer(writer, lineterminator="\n")
    out.writerow(["case_id", "modality", "source_id", "score", "rank"])
    for case_id, sal in saliencies:
        k = min(top_k, len(sal.scores))
        for source_id, score, rank in sal.top_k(k):
            out.writerow([case_id, sal.modality, source_id, repr(score), rank])
