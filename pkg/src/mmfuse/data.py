"""Dataset directory format and fold machinery.

Layout (UTF-8 CSVs with header rows, '.' decimal separator):

    manifest.csv            case_id,has_C,has_R,has_P,has_G,<label columns>
    clinical.csv            case_id,key,value
    radiology/<case>.csv    slice_index,f0..f255
    pathology/<case>.csv    patch_id,f0..f767
    genomic.csv             case_id,gene,expression
    meta.json               generator parameters and oracle statistics

Label columns: `response` (0/1) for the response task; `time_months` and
`censor` (1 = right-censored) for survival.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .optim import make_rng
from .tokenize import (PATHOLOGY_DIM, RADIOLOGY_DIM, CaseRecord, ResponseLabel,
                       SurvivalLabel)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(cases: list[CaseRecord], path: str | Path, task: str,
                  meta: Optional[dict] = None) -> None:
    root = Path(path)
    (root / "radiology").mkdir(parents=True, exist_ok=True)
    (root / "pathology").mkdir(parents=True, exist_ok=True)

    label_cols = ["response"] if task == "response" else ["time_months", "censor"]
    with open(root / "manifest.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["case_id", "has_C", "has_R", "has_P", "has_G"] + label_cols)
        for c in cases:
            avail = c.availability
            flags = [int(m in avail) for m in "CRPG"]
            if task == "response":
                labels = [c.label.cls]
            else:
                labels = [_fmt(c.label.time_months), c.label.censor]
            w.writerow([c.case_id] + flags + labels)

    with open(root / "clinical.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["case_id", "key", "value"])
        for c in cases:
            for k, v in c.clinical:
                w.writerow([c.case_id, k, _fmt(v)])

    with open(root / "genomic.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["case_id", "gene", "expression"])
        for c in cases:
            for g, x in c.genomic:
                w.writerow([c.case_id, g, _fmt(x)])

    for c in cases:
        if c.radiology is not None and len(c.radiology):
            with open(root / "radiology" / f"{c.case_id}.csv", "w",
                      encoding="utf-8", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["slice_index"] + [f"f{i}" for i in range(RADIOLOGY_DIM)])
                for i, row in enumerate(c.radiology):
                    w.writerow([i] + [_fmt(v) for v in row])
        if c.pathology is not None and len(c.pathology):
            ids = c.pathology_ids or [f"p{i:04d}" for i in range(len(c.pathology))]
            with open(root / "pathology" / f"{c.case_id}.csv", "w",
                      encoding="utf-8", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["patch_id"] + [f"f{i}" for i in range(PATHOLOGY_DIM)])
                for pid, row in zip(ids, c.pathology):
                    w.writerow([pid] + [_fmt(v) for v in row])

    if meta is not None:
        (root / "meta.json").write_text(
            json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(path: str | Path, task: str) -> list[CaseRecord]:
    root = Path(path)
    manifest = list(csv.DictReader(open(root / "manifest.csv", encoding="utf-8")))
    if not manifest:
        raise ValueError(f"empty manifest in {root}")

    clinical: dict[str, list[tuple[str, float]]] = {}
    for row in csv.DictReader(open(root / "clinical.csv", encoding="utf-8")):
        clinical.setdefault(row["case_id"], []).append((row["key"], float(row["value"])))
    genomic: dict[str, list[tuple[str, float]]] = {}
    gpath = root / "genomic.csv"
    if gpath.exists():
        for row in csv.DictReader(open(gpath, encoding="utf-8")):
            genomic.setdefault(row["case_id"], []).append((row["gene"], float(row["expression"])))

    cases = []
    for row in manifest:
        cid = row["case_id"]
        if task == "response":
            label = ResponseLabel(int(row["response"]))
        else:
            label = SurvivalLabel(censor=int(row["censor"]),
                                  time_months=float(row["time_months"]))
        rad = path_feats = None
        rad_ids: Optional[list[str]] = None
        if row["has_R"] == "1":
            rad = _read_matrix(root / "radiology" / f"{cid}.csv", RADIOLOGY_DIM,
                               order_column="slice_index")[0]
        patch_ids = None
        if row["has_P"] == "1":
            path_feats, patch_ids = _read_matrix(root / "pathology" / f"{cid}.csv",
                                                 PATHOLOGY_DIM, order_column=None)
        case = CaseRecord(
            case_id=cid,
            clinical=clinical.get(cid, []) if row["has_C"] == "1" else [],
            radiology=rad,
            pathology=path_feats,
            pathology_ids=patch_ids,
            genomic=genomic.get(cid, []) if row["has_G"] == "1" else [],
            label=label)
        expected = frozenset(m for m in "CRPG" if row[f"has_{m}"] == "1")
        if case.availability != expected:
            raise ValueError(f"case {cid}: manifest flags {sorted(expected)} do not "
                             f"match files {sorted(case.availability)}")
        cases.append(case)
    return cases


def _read_matrix(path: Path, dim: int, order_column: Optional[str]
                 ) -> tuple[np.ndarray, list[str]]:
    rows = list(csv.reader(open(path, encoding="utf-8")))
    header, body = rows[0], rows[1:]
    if len(header) != dim + 1:
        raise ValueError(f"{path}: expected {dim + 1} columns, got {len(header)}")
    ids = [r[0] for r in body]
    mat = np.array([[float(v) for v in r[1:]] for r in body])
    if order_column is not None:
        order = np.argsort([int(i) for i in ids], kind="stable")
        mat = mat[order]
        ids = [ids[i] for i in order]
    return mat, ids


# ---------------------------------------------------------------------------
# folds and survival bins

def kfold_split(cases: list[CaseRecord], k: int = 5, seed: int = 1,
                stratify: bool = True) -> dict[str, int]:
    """Deterministic k-fold assignment, stratified by response class when
    requested. Fold sizes differ by at most one."""
    if len(cases) < k:
        raise ValueError(f"need at least {k} cases for {k} folds")
    rng = make_rng((seed, 0xF01D))
    assignment: dict[str, int] = {}
    if stratify:
        by_class: dict[int, list[str]] = {}
        for c in cases:
            if not isinstance(c.label, ResponseLabel):
                raise ValueError("stratified split requires response labels")
            by_class.setdefault(c.label.cls, []).append(c.case_id)
        for cls in sorted(by_class):
            ids = sorted(by_class[cls])
            if len(ids) < k:
                raise ValueError(f"class {cls} has {len(ids)} members, fewer than k={k}")
            perm = rng.permutation(len(ids))
            for pos, idx in enumerate(perm):
                assignment[ids[idx]] = pos % k
    else:
        ids = sorted(c.case_id for c in cases)
        perm = rng.permutation(len(ids))
        for pos, idx in enumerate(perm):
            assignment[ids[idx]] = pos % k
    return assignment


def survival_bin_edges(times: np.ndarray, n_bins: int) -> np.ndarray:
    """Interior quantile edges (quartiles for n_bins=4) of uncensored
    training times."""
    if len(times) == 0:
        raise ValueError("no uncensored training times to derive bin edges")
    qs = np.linspace(0, 1, n_bins + 1)[1:-1]
    return np.quantile(np.asarray(times, dtype=np.float64), qs)


def assign_survival_bins(cases: list[CaseRecord], train_ids: set[str],
                         n_bins: int) -> np.ndarray:
    """Derive bin edges from the training split's uncensored times and stamp
    a bin index onto every case label."""
    train_times = np.array([c.label.time_months for c in cases
                            if c.case_id in train_ids and c.label.censor == 0])
    edges = survival_bin_edges(train_times, n_bins)
    for c in cases:
        c.label.bin = int(np.searchsorted(edges, c.label.time_months, side="right"))
    return edges
