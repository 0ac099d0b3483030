"""Multi-head attention: exact softmax attention, a landmark-based linear
approximation for long token sequences, and the shared pre-norm transformer
block (attention + feed-forward + layer norm).

Exact attention and the FFN are single tape nodes with hand-derived VJPs
(the training loop spends most of its time here); `grad_check` in the test
suite verifies them against central finite differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._kernels import (gelu_bwd, gelu_fwd, layer_norm_bwd, layer_norm_fwd,
                       softmax_last, softmax_last_bwd)
from .autodiff import Tensor, _node


@dataclass
class MhaParams:
    """Projection weights for multi-head attention; d must divide by heads."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        d = self.w_q.data.shape[0]
        if d % self.heads != 0:
            raise ValueError(f"model dim {d} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.w_q.data.shape[0] // self.heads


@dataclass
class BlockParams:
    """One transformer block: attention, FFN and two layer norms."""

    mha: MhaParams
    ln1_g: Tensor
    ln1_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    n, d = x.shape
    return np.ascontiguousarray(x.reshape(n, h, d // h).transpose(1, 0, 2))


def _unheads(x: np.ndarray) -> np.ndarray:
    h, n, hd = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * hd)


# ---------------------------------------------------------------------------
# raw-array forward/backward pieces shared by the fused nodes

def _mha_fwd_raw(xq: np.ndarray, xc: np.ndarray, p: MhaParams):
    h = p.heads
    scale = 1.0 / math.sqrt(p.head_dim)
    qh = _heads(xq @ p.w_q.data, h)
    kh = _heads(xc @ p.w_k.data, h)
    vh = _heads(xc @ p.w_v.data, h)
    attn = softmax_last(qh @ kh.transpose(0, 2, 1) * scale)
    o2 = _unheads(attn @ vh)
    out = o2 @ p.w_o.data
    return out, (xq, xc, qh, kh, vh, attn, o2, scale)


def _mha_bwd_raw(g: np.ndarray, cache, p: MhaParams, self_attention: bool):
    """Input gradients for the fused attention; weight gradients accumulate
    directly into the (leaf) projection parameters. For self-attention the
    query and context contributions are summed into one array."""
    xq, xc, qh, kh, vh, attn, o2, scale = cache
    h = p.heads
    g_o2 = g @ p.w_o.data.T
    ad.accum_leaf_mm(p.w_o, o2, g)
    g_oh = _heads(g_o2, h)
    g_attn = g_oh @ vh.transpose(0, 2, 1)
    g_vh = attn.transpose(0, 2, 1) @ g_oh
    g_s = softmax_last_bwd(attn, g_attn, scale)
    g_q2 = _unheads(g_s @ kh)
    g_k2 = _unheads(g_s.transpose(0, 2, 1) @ qh)
    g_v2 = _unheads(g_vh)
    ad.accum_leaf_mm(p.w_q, xq, g_q2)
    ad.accum_leaf_mm(p.w_k, xc, g_k2)
    ad.accum_leaf_mm(p.w_v, xc, g_v2)
    g_xq = g_q2 @ p.w_q.data.T
    g_xc = g_k2 @ p.w_k.data.T + g_v2 @ p.w_v.data.T
    if self_attention:
        return g_xq + g_xc, None
    return g_xq, g_xc


def _ffn_fwd_raw(x: np.ndarray, w1, b1, w2, b2):
    a = x @ w1.data + b1.data
    act, tcache = gelu_fwd(a)
    out = act @ w2.data + b2.data
    return out, (x, a, act, tcache)


def _ffn_bwd_raw(g: np.ndarray, cache, w1, b1, w2, b2) -> np.ndarray:
    x, a, act, tcache = cache
    g_act = g @ w2.data.T
    ad.accum_leaf_mm(w2, act, g)
    ad.accum_leaf_vec(b2, g.sum(axis=0))
    g_a = gelu_bwd(a, tcache, g_act)
    ad.accum_leaf_mm(w1, x, g_a)
    ad.accum_leaf_vec(b1, g_a.sum(axis=0))
    return g_a @ w1.data.T


def _ln_bwd_into(g: np.ndarray, xhat, inv, gain, bias) -> np.ndarray:
    gx, ggain, gbias = layer_norm_bwd(np.ascontiguousarray(g), xhat, inv, gain.data)
    ad.accum_leaf_vec(gain, ggain)
    ad.accum_leaf_vec(bias, gbias)
    return gx


def exact_mha(queries: Tensor, context: Tensor, p: MhaParams) -> tuple[Tensor, np.ndarray]:
    """Standard softmax attention as one fused tape node.

    queries: (n_q, d), context: (n_k, d). Returns the (n_q, d) output and the
    per-head attention maps (heads, n_q, n_k).
    """
    if queries.data.ndim != 2 or context.data.ndim != 2:
        raise ValueError("exact_mha expects 2-D token matrices")
    if queries.data.shape[1] != p.w_q.data.shape[0]:
        raise ValueError("query dim does not match W_q")
    if context.data.shape[1] != p.w_k.data.shape[0]:
        raise ValueError("context dim does not match W_k")
    h = p.heads
    scale = 1.0 / math.sqrt(p.head_dim)
    xq, xc = queries.data, context.data
    wq, wk, wv, wo = p.w_q.data, p.w_k.data, p.w_v.data, p.w_o.data
    qh = _heads(xq @ wq, h)
    kh = _heads(xc @ wk, h)
    vh = _heads(xc @ wv, h)
    attn = softmax_last(qh @ kh.transpose(0, 2, 1) * scale)
    o2 = _unheads(attn @ vh)
    out = o2 @ wo

    def vjp(g: np.ndarray):
        need = lambda t: t.requires_grad or t._parents

        def wgrad(w_tensor, act, gw):
            tw = ad.leaf_grad(w_tensor)
            if tw is not None:
                ad.accum_mm_t(act, gw, tw)
                return None
            return act.T @ gw if need(w_tensor) else None

        g_o2 = g @ wo.T
        g_wo = wgrad(p.w_o, o2, g)
        g_oh = _heads(g_o2, h)
        g_attn = g_oh @ vh.transpose(0, 2, 1)
        g_vh = attn.transpose(0, 2, 1) @ g_oh
        g_s = softmax_last_bwd(attn, g_attn, scale)
        g_q2 = _unheads(g_s @ kh)
        g_k2 = _unheads(g_s.transpose(0, 2, 1) @ qh)
        g_v2 = _unheads(g_vh)
        g_xq = g_q2 @ wq.T if need(queries) else None
        g_xc = (g_k2 @ wk.T + g_v2 @ wv.T) if need(context) else None
        g_wq = wgrad(p.w_q, xq, g_q2)
        g_wk = wgrad(p.w_k, xc, g_k2)
        g_wv = wgrad(p.w_v, xc, g_v2)
        return g_xq, g_xc, g_wq, g_wk, g_wv, g_wo

    node = _node(out, (queries, context, p.w_q, p.w_k, p.w_v, p.w_o), vjp)
    return node, attn


def ffn(x: Tensor, p: BlockParams) -> Tensor:
    """Fused linear-GELU-linear feed-forward node."""
    return ffn_apply(x, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2)


def ffn_apply(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    a = x.data @ w1.data + b1.data
    act, tcache = gelu_fwd(a)
    out = act @ w2.data + b2.data

    def vjp(g: np.ndarray):
        need = lambda t: t.requires_grad or t._parents

        def wgrad(w_tensor, act_, gw):
            tw = ad.leaf_grad(w_tensor)
            if tw is not None:
                ad.accum_mm_t(act_, gw, tw)
                return None
            return act_.T @ gw if need(w_tensor) else None

        def bgrad(b_tensor, gb):
            tb = ad.leaf_grad(b_tensor)
            if tb is not None:
                np.add(tb, gb.sum(axis=0), out=tb)
                return None
            return gb.sum(axis=0) if need(b_tensor) else None

        g_act = g @ w2.data.T
        g_a = gelu_bwd(a, tcache, g_act)
        return (g_a @ w1.data.T if need(x) else None,
                wgrad(w1, x.data, g_a), bgrad(b1, g_a),
                wgrad(w2, act, g), bgrad(b2, g))

    return _node(out, (x, w1, b1, w2, b2), vjp)


def _segment_mean_matrix(n: int, m: int) -> np.ndarray:
    """(m, n) averaging matrix over m contiguous near-equal segments; the
    last segment absorbs the remainder when m does not divide n."""
    S = np.zeros((m, n))
    base = n // m
    bounds = [i * base for i in range(m)] + [n]
    for i in range(m):
        lo, hi = bounds[i], bounds[i + 1]
        S[i, lo:hi] = 1.0 / (hi - lo)
    return S


def iterative_pinv(a: Tensor, iters: int = 6) -> Tensor:
    """Newton-Schulz style iteration for an approximate Moore-Penrose
    pseudoinverse of a square entrywise-positive matrix.

    Z_0 = A^T / (||A||_1 ||A||_inf), then
    Z <- Z (13 I - A Z (15 I - A Z (7 I - A Z))) / 4.
    """
    if a.data.ndim < 2 or a.data.shape[-1] != a.data.shape[-2]:
        raise ValueError("iterative_pinv requires a square matrix")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n = a.data.shape[-1]
    eye = Tensor(np.eye(n))
    norm1 = ad.amax(ad.tsum(a, axis=-2))     # max column sum
    norm_inf = ad.amax(ad.tsum(a, axis=-1))  # max row sum
    z = ad.div(ad.transpose_last2(a), ad.mul(norm1, norm_inf))
    for _ in range(iters):
        az = ad.matmul(a, z)
        inner = ad.sub(ad.scale(eye, 7.0), az)
        inner = ad.sub(ad.scale(eye, 15.0), ad.matmul(az, inner))
        inner = ad.sub(ad.scale(eye, 13.0), ad.matmul(az, inner))
        z = ad.scale(ad.matmul(z, inner), 0.25)
    return z


def nystrom_mha(tokens: Tensor, p: MhaParams, landmarks: int,
                pinv_iters: int = 6) -> tuple[Tensor, np.ndarray]:
    """Landmark-approximated self-attention over one token sequence.

    Landmarks are segment means of the per-head Q and K rows over `landmarks`
    contiguous near-equal segments. Returns the output and approximate
    per-head attention maps (product of the three softmax factors).
    """
    n = tokens.data.shape[0]
    if not 1 <= landmarks <= n:
        raise ValueError(f"landmarks must lie in [1, {n}], got {landmarks}")
    h = p.heads
    inv_sqrt = 1.0 / math.sqrt(p.head_dim)
    q = ad.to_heads(ad.matmul(tokens, p.w_q), h)   # (h, n, hd)
    k = ad.to_heads(ad.matmul(tokens, p.w_k), h)
    v = ad.to_heads(ad.matmul(tokens, p.w_v), h)
    seg = Tensor(_segment_mean_matrix(n, landmarks))   # (m, n) constant
    q_l = ad.matmul(seg, q)                            # (h, m, hd)
    k_l = ad.matmul(seg, k)
    f1 = ad.softmax(ad.scale(ad.matmul(q, ad.transpose_last2(k_l)), inv_sqrt), axis=-1)
    f2 = ad.softmax(ad.scale(ad.matmul(q_l, ad.transpose_last2(k_l)), inv_sqrt), axis=-1)
    f3 = ad.softmax(ad.scale(ad.matmul(q_l, ad.transpose_last2(k)), inv_sqrt), axis=-1)
    z = iterative_pinv(f2, pinv_iters)
    out_h = ad.matmul(f1, ad.matmul(z, ad.matmul(f3, v)))
    out = ad.matmul(ad.from_heads(out_h), p.w_o)
    maps = f1.data @ z.data @ f3.data
    return out, maps


def transformer_block(x: Tensor, p: BlockParams, attn_kind: str = "exact",
                      landmarks: int = 64, pinv_iters: int = 6) -> tuple[Tensor, np.ndarray]:
    """Pre-norm residual block: x + MHA(LN(x)) followed by + FFN(LN(.)).

    `attn_kind` selects exact or landmark self-attention. Row 0 is treated as
    the class token by callers; the block itself is position-agnostic. The
    exact path is a single fused tape node.
    """
    if attn_kind not in ("exact", "nystrom"):
        raise ValueError(f"unknown attention kind: {attn_kind}")
    if attn_kind == "nystrom":
        a = ad.layer_norm(x, p.ln1_g, p.ln1_b)
        att, maps = nystrom_mha(a, p.mha, landmarks=min(landmarks, x.data.shape[0]),
                                pinv_iters=pinv_iters)
        x1 = ad.add(x, att)
        out = ad.add(x1, ffn(ad.layer_norm(x1, p.ln2_g, p.ln2_b), p))
        return out, maps

    for t in (p.mha.w_q, p.mha.w_k, p.mha.w_v, p.mha.w_o, p.ln1_g, p.ln1_b,
              p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2, p.ln2_g, p.ln2_b):
        ad.leaf_or_const(t)
    xd = np.ascontiguousarray(x.data)
    a, xhat1, inv1 = layer_norm_fwd(xd, p.ln1_g.data, p.ln1_b.data, 1e-5)
    att, mha_cache = _mha_fwd_raw(a, a, p.mha)
    x1 = xd + att
    f, xhat2, inv2 = layer_norm_fwd(x1, p.ln2_g.data, p.ln2_b.data, 1e-5)
    out_f, ffn_cache = _ffn_fwd_raw(f, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2)
    out = x1 + out_f
    maps = mha_cache[5]

    def vjp(g: np.ndarray):
        g_f = _ffn_bwd_raw(g, ffn_cache, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2)
        g_x1 = g + _ln_bwd_into(g_f, xhat2, inv2, p.ln2_g, p.ln2_b)
        g_a, _ = _mha_bwd_raw(g_x1, mha_cache, p.mha, self_attention=True)
        g_x = g_x1 + _ln_bwd_into(g_a, xhat1, inv1, p.ln1_g, p.ln1_b)
        return (g_x if (x.requires_grad or x._parents) else None,)

    node = ad._node(out, (x, p.mha.w_q, p.mha.w_k, p.mha.w_v, p.mha.w_o,
                          p.ln1_g, p.ln1_b, p.ffn_w1, p.ffn_b1, p.ffn_w2,
                          p.ffn_b2, p.ln2_g, p.ln2_b),
                    lambda g: vjp(g) + (None,) * 12)
    return node, maps
