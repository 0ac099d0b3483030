"""Command-line interface.

Subcommands: gen, split, train, eval, explain, report. Each reads a JSON
config (--config) with optional --set key=value overrides and writes its
artifacts under --out. Exit codes: 0 success, 1 usage error, 2 runtime
error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmfuse",
                description="Incomplete-multimodal transformer experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fold=False):
        sp.add_argument("--config", required=True, help="JSON config path")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override (repeatable)")
        if fold:
            sp.add_argument("--fold", type=int, required=True)

    common(sub.add_parser("gen", help="generate a synthetic dataset"))
    common(sub.add_parser("split", help="write the k-fold assignment"))
    common(sub.add_parser("train", help="train one fold"), fold=True)
    common(sub.add_parser("eval", help="evaluate one fold checkpoint"), fold=True)
    exp = sub.add_parser("explain", help="attributions and saliency for one fold")
    common(exp, fold=True)
    exp.add_argument("--cases", type=int, default=10,
                     help="number of test cases to explain")
    exp.add_argument("--steps", type=int, default=64, help="integration steps")
    exp.add_argument("--top-k", type=int, default=6, help="tokens per saliency export")
    rep = sub.add_parser("report", help="aggregate fold reports")
    rep.add_argument("--out", required=True, help="directory holding fold_*/report.json")
    return p


def _load_run_config(args):
    from .config import RunConfig, load_config
    return load_config(args.config, RunConfig, args.set)


def _folds_path(out: Path) -> Path:
    return out / "folds.json"


def _load_folds(out: Path) -> dict[str, int]:
    path = _folds_path(out)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `mmfuse split` first")
    return {k: int(v) for k, v in json.loads(path.read_text(encoding="utf-8"))["assignment"].items()}


def cmd_gen(args) -> int:
    from .config import load_config
    from .synth import GenConfig, generate_synthetic
    cfg = load_config(args.config, GenConfig, args.set)
    cfg.out_dir = str(args.out)
    meta = generate_synthetic(cfg)
    keys = {k: v for k, v in meta.items() if k in ("bayes_auc", "oracle_cindex",
                                                   "label_balance", "event_rate")}
    print(f"generated {cfg.n_cases} cases in {args.out} {json.dumps(keys, sort_keys=True)}")
    return 0


def cmd_split(args) -> int:
    from .data import kfold_split, load_dataset
    cfg = _load_run_config(args)
    cases = load_dataset(cfg.dataset, cfg.task)
    assignment = kfold_split(cases, k=cfg.folds, seed=cfg.seed,
                             stratify=cfg.task == "response")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"config": cfg.to_dict(), "k": cfg.folds,
               "assignment": {k: assignment[k] for k in sorted(assignment)}}
    _folds_path(out).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n",
                                encoding="utf-8")
    sizes = [sum(1 for f in assignment.values() if f == i) for i in range(cfg.folds)]
    print(f"split {len(assignment)} cases into folds of sizes {sizes}")
    return 0


def cmd_train(args) -> int:
    from .train import train_fold
    cfg = _load_run_config(args)
    out = Path(args.out)
    folds = _load_folds(out)
    meta = train_fold(cfg, args.fold, folds, out / f"fold_{args.fold}")
    print(f"fold {args.fold}: trained {meta['steps']} steps, "
          f"final epoch loss {meta['final_epoch_loss']:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate_fold, write_report
    cfg = _load_run_config(args)
    out = Path(args.out)
    folds = _load_folds(out)
    fold_dir = out / f"fold_{args.fold}"
    report = evaluate_fold(cfg, args.fold, folds, fold_dir / "checkpoint.bin")
    write_report(report, fold_dir / "report.json")
    _write_plot_tables(report, fold_dir, cfg.task)
    full = report["test"]["subsets"]["CRPG"]
    key = "auc" if cfg.task == "response" else "cindex"
    print(f"fold {args.fold}: test {key} (full modalities) = {full.get(key)}")
    return 0


def _write_plot_tables(report: dict, fold_dir: Path, task: str) -> None:
    test = report["test"]
    if task == "response" and "roc_points" in test:
        with open(fold_dir / "roc_points.csv", "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for t, fpr, tpr in test["roc_points"]:
                w.writerow([t, repr(fpr), repr(tpr)])
    if task == "survival" and "km" in test:
        with open(fold_dir / "km.csv", "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["group", "time", "survival"])
            for gname, steps in sorted(test["km"].items()):
                for t, s in steps:
                    w.writerow([gname, t, repr(s)])


def cmd_explain(args) -> int:
    from .checkpoint import load_checkpoint, load_into_store
    from .data import load_dataset
    from .explain import export_saliency, integrated_gradients, token_saliency
    from .model import build_model, forward, tokenize_case
    from .tokenize import hash_provider
    cfg = _load_run_config(args)
    out = Path(args.out)
    folds = _load_folds(out)
    fold_dir = out / f"fold_{args.fold}"
    arrays, _ = load_checkpoint(fold_dir / "checkpoint.bin")
    mcfg = cfg.model_config()
    params, store = build_model(mcfg, seed=cfg.seed, trainable=False)
    load_into_store(arrays, store)
    kp = hash_provider("clinical-keys", cfg.embed_seed, cfg.d)
    gp = hash_provider("gene-names", cfg.embed_seed + 1, cfg.d)

    cases = [c for c in load_dataset(cfg.dataset, cfg.task)
             if folds[c.case_id] == args.fold]
    attributions = []
    saliencies = []
    for case in cases[:args.cases]:
        if case.clinical:
            attributions.append(integrated_gradients(
                case, params, mcfg, kp, gp, steps=args.steps).as_dict())
        sets = tokenize_case(case, params, kp, gp)
        pred = forward(sets, params, mcfg, capture=True)
        for modality in case.availability:
            others = case.availability - {modality}
            if not others:
                continue
            saliencies.append((case.case_id, token_saliency(pred, modality)))
    fold_dir.mkdir(parents=True, exist_ok=True)
    (fold_dir / "attributions.json").write_text(
        json.dumps({"config": cfg.to_dict(), "attributions": attributions},
                   indent=1, sort_keys=True) + "\n", encoding="utf-8")
    with open(fold_dir / "saliency.csv", "w", encoding="utf-8", newline="") as f:
        export_saliency(saliencies, top_k=args.top_k, writer=f)
    print(f"fold {args.fold}: wrote {len(attributions)} attributions and "
          f"{len(saliencies)} saliency blocks")
    return 0


def cmd_report(args) -> int:
    from .evaluate import aggregate_reports
    out = Path(args.out)
    reports = []
    for path in sorted(out.glob("fold_*/report.json")):
        reports.append(json.loads(path.read_text(encoding="utf-8")))
    if not reports:
        raise FileNotFoundError(f"no fold_*/report.json under {out}")
    agg = aggregate_reports(reports)
    (out / "aggregate.json").write_text(
        json.dumps(agg, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "aggregate.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["section", "subset", "metric", "mean", "std", "n_folds"])
        for section, rows in sorted(agg["sections"].items()):
            for sub, metrics in sorted(rows.items()):
                for metric, rec in sorted(metrics.items()):
                    w.writerow([section, sub, metric, repr(rec["mean"]),
                                repr(rec["std"]), len(rec["per_fold"])])
    key = "auc" if agg["config"].get("task", "response") == "response" else "cindex"
    full = agg["sections"].get("test", {}).get("CRPG", {}).get(key)
    if full:
        print(f"aggregate test {key} (full modalities): "
              f"{full['mean']:.4f} +/- {full['std']:.4f}")
    return 0


COMMANDS = {"gen": cmd_gen, "split": cmd_split, "train": cmd_train,
            "eval": cmd_eval, "explain": cmd_explain, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, FloatingPointError) as err:
        sys.stderr.write(f"error: {err}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
