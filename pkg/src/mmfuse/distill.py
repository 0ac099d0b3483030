"""More-to-fewer knowledge distillation: per case, an EMA teacher sees all
available modalities while shared-parameter student passes cover the
non-empty power set of those modalities; task and KL losses are summed and
one optimizer step taken, then the teacher is refreshed by EMA."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .losses import LossWeights, cross_entropy, nll_survival, total_loss
from .model import (ModelConfig, ModelParams, Prediction, forward, forward_subsets,
                    tokenize_case)
from .optim import (AdamState, FlatParamStore, adam_step_flat, ema_update_flat)
from .tokenize import MODALITIES, CaseRecord, EmbeddingProvider, ResponseLabel, SurvivalLabel

_ORDER = {m: i for i, m in enumerate(MODALITIES)}


def powerset_nonempty(modalities) -> list[frozenset]:
    """All non-empty subsets, ordered by size then lexicographically in the
    fixed C < R < P < G order."""
    unique = set(modalities)
    if not unique:
        raise ValueError("modalities must be non-empty")
    for m in unique:
        if m not in _ORDER:
            raise ValueError(f"unknown modality {m!r}")
    mods = sorted(unique, key=_ORDER.__getitem__)
    out = []
    for r in range(1, len(mods) + 1):
        for combo in combinations(mods, r):
            out.append(frozenset(combo))
    return out


@dataclass
class DistillState:
    """Live student parameters plus the EMA teacher shadow."""

    cfg: ModelConfig
    student: ModelParams
    student_store: FlatParamStore
    teacher: ModelParams
    teacher_store: FlatParamStore
    momentum: float
    weights: LossWeights
    opt: AdamState
    key_provider: EmbeddingProvider
    gene_provider: EmbeddingProvider
    step_losses: dict = field(default_factory=dict)


def make_distill_state(cfg: ModelConfig, seed: int, weights: LossWeights,
                       key_provider: EmbeddingProvider, gene_provider: EmbeddingProvider,
                       momentum: float = 0.99) -> DistillState:
    from .model import build_model
    student, s_store = build_model(cfg, seed=seed, trainable=True)
    teacher, t_store = build_model(cfg, seed=seed, trainable=False)
    t_store.load_values(s_store.values)  # teacher starts as an exact copy
    return DistillState(cfg=cfg, student=student, student_store=s_store,
                        teacher=teacher, teacher_store=t_store, momentum=momentum,
                        weights=weights, opt=AdamState.for_size(s_store.values.size),
                        key_provider=key_provider, gene_provider=gene_provider)


def select_subsets(available: frozenset, max_subsets: Optional[int],
                   rng: Optional[np.random.Generator]) -> list[frozenset]:
    """Power set of the available modalities, optionally capped.

    Under a cap the full available set is always kept and the remaining
    subsets are subsampled without replacement using the provided generator
    (deterministic given the training stream).
    """
    subsets = powerset_nonempty(available)
    if max_subsets is None or len(subsets) <= max_subsets:
        return subsets
    if rng is None:
        raise ValueError("subset cap requires a random generator")
    full = subsets[-1]
    rest = subsets[:-1]
    picked = rng.choice(len(rest), size=max_subsets - 1, replace=False)
    kept = [rest[i] for i in sorted(picked)]
    return kept + [full]


def _task_loss(pred: Prediction, case: CaseRecord) -> Tensor:
    label = case.label
    if isinstance(label, ResponseLabel):
        return cross_entropy(pred.logits, label.cls)
    if isinstance(label, SurvivalLabel):
        if label.bin < 0:
            raise ValueError(f"case {case.case_id}: survival bin not assigned")
        return nll_survival(pred.logits, label.bin, label.censor)
    raise ValueError(f"case {case.case_id} has no usable label")


def teacher_predict(case: CaseRecord, state: DistillState, capture: bool = False) -> Prediction:
    """Teacher forward over all available modalities; no side effects."""
    ts = tokenize_case(case, state.teacher, state.key_provider, state.gene_provider)
    return forward(ts, state.teacher, state.cfg, capture=capture)


def distill_step(case: CaseRecord, state: DistillState, lr: float,
                 weight_decay: float = 1e-5, max_subsets: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None,
                 force_distill: bool = False) -> dict:
    """One training step on one case.

    Teacher forward (gradient-free) on all available modalities; student
    forward per power-set subset; summed loss; one Adam step; EMA refresh.
    With alpha = beta = 0 and `force_distill` unset, the teacher machinery is
    skipped entirely -- the trajectory is the distillation-free one.
    """
    available = case.availability
    if not available:
        raise ValueError(f"case {case.case_id} has no available modality")
    w = state.weights
    distilling = force_distill or w.alpha > 0 or w.beta > 0

    subsets = select_subsets(available, max_subsets, rng)
    teacher_pred = teacher_predict(case, state) if distilling else None

    tokensets = tokenize_case(case, state.student, state.key_provider, state.gene_provider)
    preds = forward_subsets(tokensets, subsets, state.student, state.cfg)
    subset_outputs = {s: (preds[s], _task_loss(preds[s], case)) for s in subsets}
    loss, components = total_loss(subset_outputs, teacher_pred, w)

    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss on case {case.case_id}")
    # grads are zero on entry (adam clears them in the update pass)
    loss.backward()
    adam_step_flat(state.student_store.values, state.student_store.grads,
                   state.opt, lr=lr, weight_decay=weight_decay, zero_grads=True)
    if distilling:
        ema_update_flat(state.teacher_store.values, state.student_store.values,
                        state.momentum)
    components["n_subsets"] = len(subsets)
    components["per_subset_task"] = {
        "".join(sorted(s, key=_ORDER.__getitem__)): float(subset_outputs[s][1].data)
        for s in subsets}
    state.step_losses = components
    return components
