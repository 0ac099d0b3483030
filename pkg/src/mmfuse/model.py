"""The incomplete-multimodal network: per-modality class tokens, alternating
unimodal attention and cross-modal interaction stages, concatenation fusion,
and the response / discrete-hazard heads.

A missing modality is represented by its class token alone: the unimodal
stage degrades to a single-row block (self-attention weight 1, so
effectively a per-token linear/FFN transform) and the class token still
queries the other modalities in every cross-modal stage, compensating from
whatever is available.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import autodiff as ad
from .attention import BlockParams, MhaParams, exact_mha, ffn_apply, transformer_block
from .autodiff import Tensor
from .optim import FlatParamStore, make_rng
from .tokenize import (MODALITIES, CaseRecord, EmbeddingProvider, ProjectionStack,
                       TokenSet, ValueEmbedder, tokenize_clinical, tokenize_genomic,
                       tokenize_pathology, tokenize_radiology)

TASKS = ("response", "survival")


@dataclass
class ModelConfig:
    task: str = "response"
    d: int = 200
    layers: int = 2
    heads: int = 4
    d_ff: int = 400
    landmarks: int = 64
    pinv_iters: int = 6
    n_bins: int = 4       # survival hazard bins
    n_classes: int = 2    # response classes

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 2 != 0:
            raise ValueError("d must be even (sinusoidal positions)")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")

    @property
    def n_out(self) -> int:
        return self.n_classes if self.task == "response" else self.n_bins

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("task", "d", "layers", "heads", "d_ff", "landmarks",
                 "pinv_iters", "n_bins", "n_classes")}


@dataclass
class CrossParams:
    """Cross-modal interaction: class-token query attention over the other
    modalities' tokens, wrapped in the same residual + FFN pattern as the
    unimodal block."""

    mha: MhaParams
    lnq_g: Tensor
    lnq_b: Tensor
    lnc_g: Tensor
    lnc_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    lnf_g: Tensor
    lnf_b: Tensor


@dataclass
class StageParams:
    uni: dict[str, BlockParams]
    cross: dict[str, CrossParams]


@dataclass
class ModelParams:
    class_tokens: dict[str, Tensor]
    clin_value: ValueEmbedder
    expr_value: ValueEmbedder
    rad_proj: ProjectionStack
    path_proj: ProjectionStack
    stages: list[StageParams]
    head_w: Tensor
    head_b: Tensor


@dataclass
class HazardCurve:
    """Per-bin hazards, the survival step function they imply, and the scalar
    risk used for ranking (minus the summed survival)."""

    hazards: np.ndarray
    survival: np.ndarray
    risk: float


@dataclass
class Prediction:
    logits: Tensor
    fused: Tensor
    attn: dict = field(default_factory=dict)

    @property
    def probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max()
        e = np.exp(z)
        return e / e.sum()

    @property
    def hazards(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data))


def predict_survival(hazard_logits: np.ndarray) -> HazardCurve:
    """Sigmoid hazards, cumulative-product survival, risk = -sum(S)."""
    h = 1.0 / (1.0 + np.exp(-np.asarray(hazard_logits, dtype=np.float64)))
    surv = np.cumprod(1.0 - h)
    return HazardCurve(hazards=h, survival=surv, risk=float(-surv.sum()))


def survival_risk(logits: Tensor) -> Tensor:
    """Risk as a differentiable scalar (for attribution targets)."""
    one = Tensor(np.ones(()))
    surv_terms = []
    running = one
    n = logits.data.shape[0]
    keep = ad.sub(one, ad.sigmoid(logits))
    for t in range(n):
        running = ad.mul(running, ad.take(keep, t))
        surv_terms.append(running)
    total = surv_terms[0]
    for s in surv_terms[1:]:
        total = ad.add(total, s)
    return ad.neg(total)


# ---------------------------------------------------------------------------
# parameter construction

def _xavier(rng, fan_in: int, fan_out: int) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.standard_normal((fan_in, fan_out)) * std


def build_model(cfg: ModelConfig, seed: int, trainable: bool = True
                ) -> tuple[ModelParams, FlatParamStore]:
    """Create all parameters in a deterministic name order, backed by one
    flat buffer. `trainable=False` yields constant leaves (EMA teacher)."""
    d, dff = cfg.d, cfg.d_ff
    rng = make_rng(seed)
    store = FlatParamStore()

    def mat(name, fi, fo):
        store.add(name, _xavier(rng, fi, fo))

    def vec(name, n, value=0.0):
        store.add(name, np.full(n, value))

    for m in MODALITIES:
        store.add(f"class.{m}", rng.standard_normal((1, d)) * 0.02)
    store.add("embed.clin_value.w", np.zeros((1, d)))
    vec("embed.clin_value.b", d)
    store.add("embed.expr_value.w", np.zeros((1, d)))
    vec("embed.expr_value.b", d)
    mat("embed.rad_proj.w1", 256, 256); vec("embed.rad_proj.b1", 256)
    mat("embed.rad_proj.w2", 256, d); vec("embed.rad_proj.b2", d)
    mat("embed.path_proj.w1", 768, 256); vec("embed.path_proj.b1", 256)
    mat("embed.path_proj.w2", 256, d); vec("embed.path_proj.b2", d)
    for layer in range(cfg.layers):
        for m in MODALITIES:
            base = f"stage{layer}.uni.{m}"
            for w in ("w_q", "w_k", "w_v", "w_o"):
                mat(f"{base}.{w}", d, d)
            vec(f"{base}.ln1_g", d, 1.0); vec(f"{base}.ln1_b", d)
            mat(f"{base}.ffn_w1", d, dff); vec(f"{base}.ffn_b1", dff)
            mat(f"{base}.ffn_w2", dff, d); vec(f"{base}.ffn_b2", d)
            vec(f"{base}.ln2_g", d, 1.0); vec(f"{base}.ln2_b", d)
        for m in MODALITIES:
            base = f"stage{layer}.cross.{m}"
            for w in ("w_q", "w_k", "w_v", "w_o"):
                mat(f"{base}.{w}", d, d)
            vec(f"{base}.lnq_g", d, 1.0); vec(f"{base}.lnq_b", d)
            vec(f"{base}.lnc_g", d, 1.0); vec(f"{base}.lnc_b", d)
            mat(f"{base}.ffn_w1", d, dff); vec(f"{base}.ffn_b1", dff)
            mat(f"{base}.ffn_w2", dff, d); vec(f"{base}.ffn_b2", d)
            vec(f"{base}.lnf_g", d, 1.0); vec(f"{base}.lnf_b", d)
    mat("head.w", 4 * d, cfg.n_out)
    vec("head.b", cfg.n_out)

    params = store.finalize()
    if not trainable:
        for p in params.values():
            p.requires_grad = False
            p.grad = None

    def P(name):
        return params[name]

    def block(base):
        return BlockParams(
            mha=MhaParams(P(f"{base}.w_q"), P(f"{base}.w_k"), P(f"{base}.w_v"),
                          P(f"{base}.w_o"), cfg.heads),
            ln1_g=P(f"{base}.ln1_g"), ln1_b=P(f"{base}.ln1_b"),
            ffn_w1=P(f"{base}.ffn_w1"), ffn_b1=P(f"{base}.ffn_b1"),
            ffn_w2=P(f"{base}.ffn_w2"), ffn_b2=P(f"{base}.ffn_b2"),
            ln2_g=P(f"{base}.ln2_g"), ln2_b=P(f"{base}.ln2_b"))

    def cross(base):
        return CrossParams(
            mha=MhaParams(P(f"{base}.w_q"), P(f"{base}.w_k"), P(f"{base}.w_v"),
                          P(f"{base}.w_o"), cfg.heads),
            lnq_g=P(f"{base}.lnq_g"), lnq_b=P(f"{base}.lnq_b"),
            lnc_g=P(f"{base}.lnc_g"), lnc_b=P(f"{base}.lnc_b"),
            ffn_w1=P(f"{base}.ffn_w1"), ffn_b1=P(f"{base}.ffn_b1"),
            ffn_w2=P(f"{base}.ffn_w2"), ffn_b2=P(f"{base}.ffn_b2"),
            lnf_g=P(f"{base}.lnf_g"), lnf_b=P(f"{base}.lnf_b"))

    tree = ModelParams(
        class_tokens={m: P(f"class.{m}") for m in MODALITIES},
        clin_value=ValueEmbedder(P("embed.clin_value.w"), P("embed.clin_value.b")),
        expr_value=ValueEmbedder(P("embed.expr_value.w"), P("embed.expr_value.b")),
        rad_proj=ProjectionStack(P("embed.rad_proj.w1"), P("embed.rad_proj.b1"),
                                 P("embed.rad_proj.w2"), P("embed.rad_proj.b2")),
        path_proj=ProjectionStack(P("embed.path_proj.w1"), P("embed.path_proj.b1"),
                                  P("embed.path_proj.w2"), P("embed.path_proj.b2")),
        stages=[StageParams(uni={m: block(f"stage{l}.uni.{m}") for m in MODALITIES},
                            cross={m: cross(f"stage{l}.cross.{m}") for m in MODALITIES})
                for l in range(cfg.layers)],
        head_w=P("head.w"), head_b=P("head.b"))
    return tree, store


# ---------------------------------------------------------------------------
# tokenization of a whole case

def tokenize_case(case: CaseRecord, params: ModelParams,
                  key_provider: EmbeddingProvider,
                  gene_provider: EmbeddingProvider) -> dict[str, Optional[TokenSet]]:
    out: dict[str, Optional[TokenSet]] = {m: None for m in MODALITIES}
    if case.clinical:
        out["C"] = tokenize_clinical(case.clinical, key_provider, params.clin_value)
    if case.radiology is not None and len(case.radiology):
        out["R"] = tokenize_radiology(case.radiology, params.rad_proj)
    if case.pathology is not None and len(case.pathology):
        out["P"] = tokenize_pathology(case.pathology, params.path_proj,
                                      patch_ids=case.pathology_ids)
    if case.genomic:
        out["G"] = tokenize_genomic(case.genomic, gene_provider, params.expr_value)
    return out


# ---------------------------------------------------------------------------
# stages

def _attn_kind(modality: str, seq_len: int, cfg: ModelConfig) -> str:
    if modality in ("P", "G") and seq_len > 2 * cfg.landmarks:
        return "nystrom"
    return "exact"


def unimodal_stage(modality: str, class_token: Tensor, tokens: Optional[Tensor],
                   block: BlockParams, cfg: ModelConfig) -> tuple[Tensor, np.ndarray]:
    """Self-attention block over [class || tokens]; with the modality absent
    the block runs on the single class row."""
    seq = class_token if tokens is None else ad.concat_rows([class_token, tokens])
    return transformer_block(seq, block, attn_kind=_attn_kind(modality, seq.data.shape[0], cfg),
                             landmarks=cfg.landmarks, pinv_iters=cfg.pinv_iters)


def cross_modal_stage(modality: str, class_token: Tensor,
                      context: Optional[Tensor], p: CrossParams
                      ) -> tuple[Tensor, Optional[np.ndarray]]:
    """class' = class + MHA(LN(class), LN(context)), then + FFN residual.

    With an empty context (all other modalities absent) the attention term is
    skipped entirely. One fused tape node either way.
    """
    from .attention import (_ffn_bwd_raw, _ffn_fwd_raw, _ln_bwd_into,
                            _mha_bwd_raw, _mha_fwd_raw)
    from ._kernels import layer_norm_fwd
    for t in (p.mha.w_q, p.mha.w_k, p.mha.w_v, p.mha.w_o, p.lnq_g, p.lnq_b,
              p.lnc_g, p.lnc_b, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2,
              p.lnf_g, p.lnf_b):
        ad.leaf_or_const(t)
    cls = np.ascontiguousarray(class_token.data)

    if context is None:
        f, xhatf, invf = layer_norm_fwd(cls, p.lnf_g.data, p.lnf_b.data, 1e-5)
        out_f, ffn_cache = _ffn_fwd_raw(f, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2)
        out = cls + out_f

        def vjp_nc(g: np.ndarray):
            g_f = _ffn_bwd_raw(g, ffn_cache, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2)
            g_cls = g + _ln_bwd_into(g_f, xhatf, invf, p.lnf_g, p.lnf_b)
            return (g_cls if (class_token.requires_grad or class_token._parents)
                    else None,) + (None,) * 14

        node = ad._node(out, (class_token, p.mha.w_q, p.mha.w_k, p.mha.w_v,
                              p.mha.w_o, p.lnq_g, p.lnq_b, p.lnc_g, p.lnc_b,
                              p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2,
                              p.lnf_g, p.lnf_b), vjp_nc)
        return node, None

    ctx = np.ascontiguousarray(context.data)
    aq, xhatq, invq = layer_norm_fwd(cls, p.lnq_g.data, p.lnq_b.data, 1e-5)
    ac, xhatc, invc = layer_norm_fwd(ctx, p.lnc_g.data, p.lnc_b.data, 1e-5)
    att, mha_cache = _mha_fwd_raw(aq, ac, p.mha)
    c1 = cls + att
    f, xhatf, invf = layer_norm_fwd(c1, p.lnf_g.data, p.lnf_b.data, 1e-5)
    out_f, ffn_cache = _ffn_fwd_raw(f, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2)
    out = c1 + out_f
    maps = mha_cache[5]

    def vjp(g: np.ndarray):
        g_f = _ffn_bwd_raw(g, ffn_cache, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2)
        g_c1 = g + _ln_bwd_into(g_f, xhatf, invf, p.lnf_g, p.lnf_b)
        g_aq, g_ac = _mha_bwd_raw(g_c1, mha_cache, p.mha, self_attention=False)
        g_cls = g_c1 + _ln_bwd_into(g_aq, xhatq, invq, p.lnq_g, p.lnq_b)
        g_ctx = _ln_bwd_into(g_ac, xhatc, invc, p.lnc_g, p.lnc_b)
        return ((g_cls if (class_token.requires_grad or class_token._parents) else None),
                (g_ctx if (context.requires_grad or context._parents) else None),
                ) + (None,) * 14

    node = ad._node(out, (class_token, context, p.mha.w_q, p.mha.w_k, p.mha.w_v,
                          p.mha.w_o, p.lnq_g, p.lnq_b, p.lnc_g, p.lnc_b,
                          p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2,
                          p.lnf_g, p.lnf_b), vjp)
    return node, maps


def fuse_and_head(class_outs: dict[str, Tensor], head_w: Tensor, head_b: Tensor
                  ) -> tuple[Tensor, Tensor]:
    """Concatenate the four class tokens in fixed C,R,P,G order and apply the
    linear head. Returns (logits, fused)."""
    fused_rows = ad.concat_rows([class_outs[m] for m in MODALITIES])
    d = fused_rows.data.shape[1]
    fused = ad.reshape(fused_rows, (1, 4 * d))
    logits = ad.reshape(ad.linear(fused, head_w, head_b), (head_b.data.shape[0],))
    return logits, ad.reshape(fused, (4 * d,))


# ---------------------------------------------------------------------------
# forward

def forward_subsets(tokensets: dict[str, Optional[TokenSet]],
                    subsets: Iterable[frozenset],
                    params: ModelParams, cfg: ModelConfig,
                    capture: bool = False) -> dict[frozenset, Prediction]:
    """Evaluate the network once per modality subset.

    Modalities outside a subset are treated as absent even if tokenized. The
    first unimodal stage depends only on one modality's tokens, so its
    outputs are computed once and shared across subsets; values are identical
    to independent per-subset evaluation.
    """
    available = frozenset(m for m in MODALITIES if tokensets.get(m) is not None)
    subsets = [frozenset(s) for s in subsets]
    for s in subsets:
        if not s:
            raise ValueError("cannot evaluate an empty modality subset")
        if not s <= available:
            raise ValueError(f"subset {sorted(s)} not within available {sorted(available)}")
    if not available:
        raise ValueError("no modality available")

    stage0 = params.stages[0]
    uni_full: dict[str, Tensor] = {}
    uni_solo: dict[str, Tensor] = {}
    maps_full: dict[str, np.ndarray] = {}
    need_solo = {m for m in MODALITIES if any(m not in s for s in subsets)}
    need_full = {m for m in MODALITIES if any(m in s for s in subsets)}
    for m in MODALITIES:
        if m in need_full and tokensets.get(m) is not None:
            uni_full[m], maps_full[m] = unimodal_stage(
                m, params.class_tokens[m], tokensets[m].tokens, stage0.uni[m], cfg)
        if m in need_solo or tokensets.get(m) is None:
            uni_solo[m], _ = unimodal_stage(m, params.class_tokens[m], None,
                                            stage0.uni[m], cfg)

    results: dict[frozenset, Prediction] = {}
    for s in subsets:
        attn: dict = {}
        state = {m: (uni_full[m] if m in s else uni_solo[m]) for m in MODALITIES}
        if capture:
            for m in s:
                attn[(0, m, "unimodal")] = {"maps": maps_full[m],
                                            "sources": tokensets[m].source_ids}
        classes = {m: ad.rows(state[m], 0, 1) for m in MODALITIES}
        for layer in range(cfg.layers):
            stage = params.stages[layer]
            if layer > 0:
                new_state = {}
                for m in MODALITIES:
                    toks = ad.rows(state[m], 1, state[m].data.shape[0]) if m in s else None
                    seq, maps = unimodal_stage(m, classes[m], toks, stage.uni[m], cfg)
                    new_state[m] = seq
                    if capture and m in s:
                        attn[(layer, m, "unimodal")] = {"maps": maps,
                                                        "sources": tokensets[m].source_ids}
                state = new_state
                classes = {m: ad.rows(state[m], 0, 1) for m in MODALITIES}
            new_classes = {}
            for m in MODALITIES:
                parts, segments = [], []
                for m2 in MODALITIES:
                    if m2 == m or m2 not in s:
                        continue
                    n2 = state[m2].data.shape[0]
                    parts.append(ad.rows(state[m2], 1, n2))
                    segments.append((m2, n2 - 1))
                context = ad.concat_rows(parts) if parts else None
                new_classes[m], maps = cross_modal_stage(m, classes[m], context,
                                                         stage.cross[m])
                if capture and maps is not None:
                    attn[(layer, m, "cross")] = {"maps": maps, "segments": segments}
            classes = new_classes
        logits, fused = fuse_and_head(classes, params.head_w, params.head_b)
        results[s] = Prediction(logits=logits, fused=fused, attn=attn)
    return results


def forward(tokensets: dict[str, Optional[TokenSet]], params: ModelParams,
            cfg: ModelConfig, subset: Optional[frozenset] = None,
            capture: bool = False) -> Prediction:
    """Single-subset forward; defaults to all available modalities."""
    available = frozenset(m for m in MODALITIES if tokensets.get(m) is not None)
    if subset is None:
        subset = available
    return forward_subsets(tokensets, [subset], params, cfg, capture=capture)[frozenset(subset)]
