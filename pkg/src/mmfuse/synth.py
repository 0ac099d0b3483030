"""Synthetic dataset generator with a planted cross-modal signal.

Latents per case: two fair sign bits b1, b2 and a Gaussian g. The label
score is

    S = joint_strength * b1 * b2  +  marginal_strength * g,

with the response label y = 1{S + noise > 0} (probit noise) and, for the
survival task, exponential event times with log-hazard proportional to S.
The product b1*b2 is independent of each single bit, so the joint term is
invisible to any modality that sees only one of them: recovering it
requires fusing modalities, while g supplies per-modality marginal signal.

Feature placement: clinical carries g exactly, b1 exactly and a very noisy
view of b2; radiology and pathology carry b2 plus a noisy g inside one
designated high-signal slice/patch (all other tokens are pure noise, which
gives saliency a ground truth); genomics carries b1 and a noisy g in two
designated genes.

The generator records the Bayes-optimal AUC of the response rule computed
by numerical integration of its own likelihood model (exact latent
recovery), which upper-bounds what any model can reach on these files.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import quad

from .data import write_dataset
from .metrics import SurvivalSample, concordance_index
from .optim import RNG_ALGORITHM, make_rng
from .tokenize import PATHOLOGY_DIM, RADIOLOGY_DIM, CaseRecord, ResponseLabel, SurvivalLabel

CLINICAL_KEYS = ["age", "gender", "stage_t", "cea", "ca199", "ca125", "alb",
                 "wbc"]
CLIN_MARGINAL_KEY = "cea"      # carries g exactly
CLIN_JOINT_KEY = "ca199"       # carries b1 exactly
CLIN_WEAK_JOINT_KEY = "alb"    # carries b2 + heavy noise
GENE_JOINT = "SIG_JOINT"       # carries b1
GENE_MARGINAL = "SIG_MARG"     # carries noisy g


@dataclass
class GenConfig:
    task: str = "response"
    n_cases: int = 600
    seed: int = 1
    out_dir: str = ""
    miss_c: float = 0.0
    miss_r: float = 0.3
    miss_p: float = 0.3
    miss_g: float = 0.3
    joint_strength: float = 1.6
    marginal_strength: float = 0.75
    label_noise: float = 0.95
    feature_noise: float = 0.05
    weak_joint_noise: float = 2.0      # clinical view of b2
    marginal_view_noise: float = 0.8   # g noise inside R/P/G views
    signal_amplitude: float = 4.0      # b2 amplitude in the hot slice/patch
    marginal_amplitude: float = 2.0    # g amplitude in the hot slice/patch
    n_rad_min: int = 2
    n_rad_max: int = 4
    n_path_min: int = 3
    n_path_max: int = 5
    n_gene_noise: int = 4
    surv_median_months: float = 24.0
    surv_log_hazard_scale: float = 0.8
    censor_lo_months: float = 6.0
    censor_hi_months: float = 80.0

    def __post_init__(self):
        for r in (self.miss_c, self.miss_r, self.miss_p, self.miss_g):
            if not 0.0 <= r < 1.0:
                raise ValueError("missingness rates must lie in [0, 1)")
        if self.task not in ("response", "survival"):
            raise ValueError(f"unknown task {self.task}")
        if self.n_cases < 1:
            raise ValueError("n_cases must be positive")


def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def bayes_auc(joint: float, marginal: float, noise: float) -> float:
    """AUC of the Bayes-optimal score under exact latent recovery.

    The sufficient score S is a symmetric two-component Gaussian mixture
    (means +-joint, std marginal) and P(y=1 | S) = Phi(S / noise); the AUC
    is the integral of Phi(s1/noise) (1 - Phi(s2/noise)) over s1 > s2
    against the mixture density, normalized by P(y=1) P(y=0) = 1/4.
    """
    if marginal <= 0:
        raise ValueError("marginal strength must be positive for the closed form")
    sd = marginal

    def fmix(s: float) -> float:
        return 0.5 * (math.exp(-0.5 * ((s - joint) / sd) ** 2)
                      + math.exp(-0.5 * ((s + joint) / sd) ** 2)) / (sd * math.sqrt(2 * math.pi))

    lo, hi = -joint - 10 * sd, joint + 10 * sd

    def inner(s1: float) -> float:
        val, _ = quad(lambda s2: fmix(s2) * (1.0 - _phi(s2 / noise)), lo, s1,
                      epsabs=1e-11, epsrel=1e-9, limit=200)
        return val

    num, _ = quad(lambda s1: fmix(s1) * _phi(s1 / noise) * inner(s1), lo, hi,
                  epsabs=1e-10, epsrel=1e-8, limit=200)
    return float(num / 0.25)


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def generate_synthetic(cfg: GenConfig) -> dict:
    """Write a dataset directory; returns the metadata dict (also saved as
    meta.json). Deterministic per seed, byte for byte."""
    rng = make_rng((cfg.seed, 0x5E17))
    n = cfg.n_cases

    b1 = rng.integers(0, 2, size=n) * 2 - 1
    b2 = rng.integers(0, 2, size=n) * 2 - 1
    g = rng.standard_normal(n)
    score = cfg.joint_strength * b1 * b2 + cfg.marginal_strength * g

    if cfg.task == "response":
        y = (score + cfg.label_noise * rng.standard_normal(n) > 0).astype(int)
    else:
        lam0 = math.log(2.0) / cfg.surv_median_months
        u = rng.random(n)
        t_event = -np.log(u) / (lam0 * np.exp(cfg.surv_log_hazard_scale * score))
        t_cens = rng.uniform(cfg.censor_lo_months, cfg.censor_hi_months, size=n)
        t_obs = np.minimum(t_event, t_cens)
        censor = (t_event > t_cens).astype(int)
        t_obs = np.maximum(t_obs, 1e-3)

    avail = np.ones((n, 4), dtype=bool)
    for j, rate in enumerate((cfg.miss_c, cfg.miss_r, cfg.miss_p, cfg.miss_g)):
        if rate > 0:
            avail[:, j] = rng.random(n) >= rate
    # a case must keep at least one modality; fall back to clinical
    none_left = ~avail.any(axis=1)
    avail[none_left, 0] = True

    u_r_joint = _unit(rng, RADIOLOGY_DIM)
    u_r_marg = _unit(rng, RADIOLOGY_DIM)
    u_p_joint = _unit(rng, PATHOLOGY_DIM)
    u_p_marg = _unit(rng, PATHOLOGY_DIM)

    cases: list[CaseRecord] = []
    planted: dict[str, dict] = {}
    for i in range(n):
        cid = f"case{i:04d}"
        clinical = []
        for key in CLINICAL_KEYS:
            if key == CLIN_MARGINAL_KEY:
                v = float(g[i])
            elif key == CLIN_JOINT_KEY:
                v = float(b1[i])
            elif key == CLIN_WEAK_JOINT_KEY:
                v = float(b2[i] + cfg.weak_joint_noise * rng.standard_normal())
            else:
                v = float(rng.standard_normal())
            clinical.append((key, v))

        n_rad = int(rng.integers(cfg.n_rad_min, cfg.n_rad_max + 1))
        rad = cfg.feature_noise * rng.standard_normal((n_rad, RADIOLOGY_DIM))
        hot_slice = int(rng.integers(0, n_rad))
        rad[hot_slice] += (cfg.signal_amplitude * b2[i] * u_r_joint
                           + cfg.marginal_amplitude
                           * (g[i] + cfg.marginal_view_noise * rng.standard_normal()) * u_r_marg)

        n_path = int(rng.integers(cfg.n_path_min, cfg.n_path_max + 1))
        path = cfg.feature_noise * rng.standard_normal((n_path, PATHOLOGY_DIM))
        hot_patch = int(rng.integers(0, n_path))
        path[hot_patch] += (cfg.signal_amplitude * b2[i] * u_p_joint
                            + cfg.marginal_amplitude
                            * (g[i] + cfg.marginal_view_noise * rng.standard_normal()) * u_p_marg)
        patch_ids = [f"p{j:04d}" for j in range(n_path)]

        genomic = [(GENE_JOINT, float(b1[i] + 0.5 * rng.standard_normal())),
                   (GENE_MARGINAL, float(g[i] + cfg.marginal_view_noise * rng.standard_normal()))]
        for j in range(cfg.n_gene_noise):
            genomic.append((f"GENE_{j:03d}", float(rng.standard_normal())))

        has_c, has_r, has_p, has_g = avail[i]
        label = (ResponseLabel(int(y[i])) if cfg.task == "response"
                 else SurvivalLabel(censor=int(censor[i]), time_months=float(t_obs[i])))
        cases.append(CaseRecord(
            case_id=cid,
            clinical=clinical if has_c else [],
            radiology=rad if has_r else None,
            pathology=path if has_p else None,
            pathology_ids=patch_ids if has_p else None,
            genomic=genomic if has_g else [],
            label=label))
        planted[cid] = {"radiology_hot": hot_slice, "pathology_hot": patch_ids[hot_patch],
                        "b1": int(b1[i]), "b2": int(b2[i]), "g": float(g[i]),
                        "score": float(score[i])}

    gen_params = {k: v for k, v in asdict(cfg).items() if k != "out_dir"}
    meta = {"generator": gen_params, "rng": {"algorithm": RNG_ALGORITHM,
                                             "seed": cfg.seed},
            "signal_genes": [GENE_JOINT, GENE_MARGINAL],
            "clinical_signal_keys": {"marginal": CLIN_MARGINAL_KEY,
                                     "joint_b1": CLIN_JOINT_KEY,
                                     "weak_b2": CLIN_WEAK_JOINT_KEY},
            "planted": planted}
    if cfg.task == "response":
        if cfg.joint_strength == 0 and cfg.marginal_strength == 0:
            import warnings
            warnings.warn("degenerate signal spec: zero joint and marginal strength")
        meta["bayes_auc"] = bayes_auc(cfg.joint_strength, cfg.marginal_strength,
                                      cfg.label_noise)
        meta["label_balance"] = float(np.mean(y))
    else:
        samples = [SurvivalSample(risk=float(score[i]), time=float(t_obs[i]),
                                  event=censor[i] == 0) for i in range(n)]
        meta["oracle_cindex"] = concordance_index(samples)
        meta["event_rate"] = float(1.0 - np.mean(censor))

    write_dataset(cases, cfg.out_dir, cfg.task, meta=meta)
    return meta
