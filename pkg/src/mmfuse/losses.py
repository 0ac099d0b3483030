"""Training objectives: cross-entropy, temperature-scaled KL for feature and
response distillation, the discrete-time survival negative log-likelihood,
and the power-set total-loss composer."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Prediction

LOG_CLAMP = 1e-12


@dataclass
class LossWeights:
    """alpha weights feature-level distillation, beta response-level;
    temperature scales both softmaxes inside the KL."""

    alpha: float = 5.0
    beta: float = 3.0
    temperature: float = 4.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("distillation weights must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label]."""
    n = logits.data.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range for {n} logits")
    if not np.isfinite(logits.data).all():
        raise FloatingPointError("cross_entropy: non-finite logits")
    return ad.neg(ad.take(ad.log_softmax(logits), label))


def kl_temperature(teacher_vec, student_vec: Tensor, temperature: float) -> Tensor:
    """KL(softmax(teacher/T) || softmax(student/T)).

    The teacher side is treated as a constant; gradients flow only through
    the student logits/features.
    """
    t = np.asarray(teacher_vec.data if isinstance(teacher_vec, Tensor) else teacher_vec,
                   dtype=np.float64)
    if t.shape != student_vec.data.shape:
        raise ValueError("teacher/student vectors must have the same shape")
    if t.size < 2:
        raise ValueError("kl_temperature needs at least 2 components")

    def log_softmax_np(z):
        z = z / temperature
        m = z.max()
        e = np.exp(z - m)
        return z - (np.log(e.sum()) + m)

    # both log-softmaxes go through the same code path so KL(p || p) cancels
    # to exactly zero
    log_p = log_softmax_np(t)
    p = np.exp(log_p)
    log_q = log_softmax_np(student_vec.data)
    out = np.asarray((p * log_p).sum() - (p * log_q).sum())

    def vjp(g: np.ndarray):
        # d/ds of -sum p log_softmax(s/T) = (softmax(s/T) - p) / T
        return (g * (np.exp(log_q) - p) / temperature,)

    return ad._node(out, (student_vec,), vjp)


def nll_survival(hazard_logits: Tensor, bin_index: int, censor: int) -> Tensor:
    """Discrete-time survival NLL over sigmoid hazards.

    Uncensored (censor=0): -log h_l - sum_{k<l} log(1 - h_k).
    Censored   (censor=1): -sum_{k<=l} log(1 - h_k).
    Log arguments are clamped at 1e-12 against saturated hazards.
    """
    n = hazard_logits.data.shape[0]
    if not 0 <= bin_index < n:
        raise ValueError(f"bin {bin_index} out of range for {n} hazard bins")
    if censor not in (0, 1):
        raise ValueError(f"censor must be 0 or 1, got {censor}")
    h = ad.sigmoid(hazard_logits)
    log_keep = ad.log(ad.clip_min(ad.sub(Tensor(np.ones(n)), h), LOG_CLAMP))
    if censor == 1:
        return ad.neg(ad.tsum(ad.rows(log_keep, 0, bin_index + 1)))
    loss = ad.neg(ad.log(ad.clip_min(ad.take(h, bin_index), LOG_CLAMP)))
    if bin_index > 0:
        loss = ad.sub(loss, ad.tsum(ad.rows(log_keep, 0, bin_index)))
    return loss


def total_loss(subset_outputs: dict[frozenset, tuple[Prediction, Tensor]],
               teacher_output: Optional[Prediction],
               weights: LossWeights) -> tuple[Tensor, dict]:
    """Sum task losses over the modality power set and add the two
    distillation terms against the (constant) teacher output.

    Returns the scalar loss tensor plus a float breakdown.
    """
    if not subset_outputs:
        raise ValueError("total_loss needs at least one subset output")
    task_total: Tensor | None = None
    for s in sorted(subset_outputs, key=_subset_sort_key):
        _, task = subset_outputs[s]
        task_total = task if task_total is None else ad.add(task_total, task)
    total = task_total
    fea_val = res_val = 0.0
    if (weights.alpha > 0 or weights.beta > 0) and teacher_output is None:
        raise ValueError("distillation weights set but no teacher output given")
    if teacher_output is not None:
        t_fused = teacher_output.fused.data
        t_logits = teacher_output.logits.data
        fea_total = res_total = None
        for s in sorted(subset_outputs, key=_subset_sort_key):
            pred, _ = subset_outputs[s]
            fea = kl_temperature(t_fused, pred.fused, weights.temperature)
            res = kl_temperature(t_logits, pred.logits, weights.temperature)
            fea_total = fea if fea_total is None else ad.add(fea_total, fea)
            res_total = res if res_total is None else ad.add(res_total, res)
        fea_val = float(fea_total.data)
        res_val = float(res_total.data)
        total = ad.add(total, ad.add(ad.scale(fea_total, weights.alpha),
                                     ad.scale(res_total, weights.beta)))
    components = {"task": float(task_total.data), "fea": fea_val, "res": res_val,
                  "total": float(total.data)}
    return total, components


def _subset_sort_key(s: frozenset) -> tuple:
    order = {"C": 0, "R": 1, "P": 2, "G": 3}
    return (len(s), tuple(sorted(order[m] for m in s)))
