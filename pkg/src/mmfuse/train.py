"""Per-fold training loop: seeded shuffles, one distillation step per case,
cosine learning-rate decay over epochs x cases steps, checkpoint and loss
curves at the end."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import assign_survival_bins, load_dataset
from .distill import DistillState, distill_step, make_distill_state
from .losses import LossWeights
from .optim import cosine_lr, make_rng, rng_metadata
from .tokenize import CaseRecord, hash_provider


def train_fold(cfg: RunConfig, fold: int, fold_assignment: dict[str, int],
               out_dir: str | Path, cases: list[CaseRecord] | None = None) -> dict:
    """Train on every fold except `fold`; writes checkpoint.bin, losses.csv
    and train_meta.json under out_dir. Returns the metadata dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cases is None:
        cases = load_dataset(cfg.dataset, cfg.task)
    by_id = {c.case_id: c for c in cases}
    unknown = set(by_id) - set(fold_assignment)
    if unknown:
        raise ValueError(f"cases missing from fold assignment: {sorted(unknown)[:5]}")
    train_ids = sorted(cid for cid, f in fold_assignment.items()
                       if f != fold and cid in by_id)
    if not train_ids:
        raise ValueError(f"fold {fold}: empty training split")

    extra: dict = {"fold": fold}
    if cfg.task == "survival":
        edges = assign_survival_bins(cases, set(train_ids), cfg.n_bins)
        extra["bin_edges"] = [float(e) for e in edges]

    mcfg = cfg.model_config()
    weights = LossWeights(alpha=cfg.alpha if cfg.distill else 0.0,
                          beta=cfg.beta if cfg.distill else 0.0,
                          temperature=cfg.temperature)
    state = make_distill_state(
        mcfg, seed=cfg.seed, weights=weights,
        key_provider=hash_provider("clinical-keys", cfg.embed_seed, cfg.d),
        gene_provider=hash_provider("gene-names", cfg.embed_seed + 1, cfg.d),
        momentum=cfg.ema_momentum)

    loop_rng = make_rng((cfg.seed, fold, 0x7A11))
    total_steps = max(1, cfg.epochs * len(train_ids))
    step = 0
    epoch_rows = []
    for epoch in range(cfg.epochs):
        order = loop_rng.permutation(len(train_ids))
        sums = {"total": 0.0, "task": 0.0, "fea": 0.0, "res": 0.0}
        for idx in order:
            case = by_id[train_ids[idx]]
            lr = cosine_lr(step, total_steps, cfg.lr)
            try:
                comp = distill_step(case, state, lr=lr, weight_decay=cfg.weight_decay,
                                    max_subsets=cfg.max_subsets, rng=loop_rng)
            except FloatingPointError as err:
                diag = {"case_id": case.case_id, "epoch": epoch, "step": step,
                        "error": str(err)}
                (out / "abort_diagnostic.json").write_text(
                    json.dumps(diag, indent=1, sort_keys=True), encoding="utf-8")
                raise
            for k in sums:
                sums[k] += comp[k]
            step += 1
        n = len(train_ids)
        epoch_rows.append({"epoch": epoch, "lr": cosine_lr(step, total_steps, cfg.lr),
                           **{k: sums[k] / n for k in sums}})

    with open(out / "losses.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "total", "task", "fea", "res", "lr"])
        for r in epoch_rows:
            w.writerow([r["epoch"], repr(r["total"]), repr(r["task"]),
                        repr(r["fea"]), repr(r["res"]), repr(r["lr"])])

    save_checkpoint(out / "checkpoint.bin", state.student_store.named_arrays(),
                    config=cfg.to_dict(), rng_meta=rng_metadata(cfg.seed), extra=extra)
    meta = {"fold": fold, "n_train": len(train_ids), "steps": step,
            "config": cfg.to_dict(), "rng": rng_metadata(cfg.seed),
            "final_epoch_loss": epoch_rows[-1]["total"] if epoch_rows else None,
            **({"bin_edges": extra["bin_edges"]} if "bin_edges" in extra else {})}
    (out / "train_meta.json").write_text(
        json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return meta
