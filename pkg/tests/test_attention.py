import math

import numpy as np
import pytest

from mmfuse import autodiff as ad
from mmfuse.attention import (BlockParams, MhaParams, exact_mha, ffn_apply,
                              iterative_pinv, nystrom_mha, transformer_block)
from mmfuse.autodiff import Tensor, grad_check


def make_mha(rng, d, h, scale=0.5):
    return MhaParams(*(Tensor(rng.standard_normal((d, d)) * scale) for _ in range(4)),
                     heads=h)


def make_block(rng, d, h, dff):
    return BlockParams(
        mha=make_mha(rng, d, h),
        ln1_g=Tensor(np.ones(d)), ln1_b=Tensor(np.zeros(d)),
        ffn_w1=Tensor(rng.standard_normal((d, dff)) * 0.3),
        ffn_b1=Tensor(np.zeros(dff)),
        ffn_w2=Tensor(rng.standard_normal((dff, d)) * 0.3),
        ffn_b2=Tensor(np.zeros(d)),
        ln2_g=Tensor(np.ones(d)), ln2_b=Tensor(np.zeros(d)))


def dense_reference_mha(xq, xc, p: MhaParams):
    """Straight-line single-loop oracle, no fused parts."""
    h, d = p.heads, xq.shape[1]
    hd = d // h
    q = xq @ p.w_q.data
    k = xc @ p.w_k.data
    v = xc @ p.w_v.data
    outs = []
    maps = []
    for a in range(h):
        qa = q[:, a * hd:(a + 1) * hd]
        ka = k[:, a * hd:(a + 1) * hd]
        va = v[:, a * hd:(a + 1) * hd]
        s = qa @ ka.T / math.sqrt(hd)
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        attn = e / e.sum(axis=1, keepdims=True)
        maps.append(attn)
        outs.append(attn @ va)
    return np.concatenate(outs, axis=1) @ p.w_o.data, np.stack(maps)


def test_mha_single_key_weight_one(rng):
    d, h = 8, 2
    p = make_mha(rng, d, h)
    xq = rng.standard_normal((3, d))
    xc = rng.standard_normal((1, d))
    out, maps = exact_mha(Tensor(xq), Tensor(xc), p)
    assert np.allclose(maps, 1.0, atol=0)
    # output equals W_o(V row) for every query
    expected = np.tile((xc @ p.w_v.data) @ p.w_o.data, (3, 1))
    assert np.abs(out.data - expected).max() < 1e-12


def test_mha_identical_context_rows_match_single_key(rng):
    d, h = 8, 2
    p = make_mha(rng, d, h)
    xq = rng.standard_normal((2, d))
    row = rng.standard_normal((1, d))
    out1, _ = exact_mha(Tensor(xq), Tensor(row), p)
    out5, _ = exact_mha(Tensor(xq), Tensor(np.tile(row, (5, 1))), p)
    assert np.abs(out1.data - out5.data).max() < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_mha_matches_dense_reference(seed):
    rng = np.random.default_rng(seed)
    d, h = 12, 1 if seed % 2 else 4
    p = make_mha(rng, d, h)
    xq = rng.standard_normal((2, d))
    xc = rng.standard_normal((3, d))
    out, maps = exact_mha(Tensor(xq), Tensor(xc), p)
    ref_out, ref_maps = dense_reference_mha(xq, xc, p)
    assert np.abs(out.data - ref_out).max() < 1e-12
    assert np.abs(maps - ref_maps).max() < 1e-12


def test_mha_permutation_equivariance_in_context(rng):
    d, h = 8, 2
    p = make_mha(rng, d, h)
    xq = rng.standard_normal((3, d))
    xc = rng.standard_normal((6, d))
    out, _ = exact_mha(Tensor(xq), Tensor(xc), p)
    perm = rng.permutation(6)
    out_p, _ = exact_mha(Tensor(xq), Tensor(xc[perm]), p)
    assert np.abs(out.data - out_p.data).max() < 1e-12


def test_attention_maps_row_stochastic(rng):
    d, h = 8, 4
    p = make_mha(rng, d, h)
    _, maps = exact_mha(Tensor(rng.standard_normal((5, d))),
                        Tensor(rng.standard_normal((7, d))), p)
    assert maps.shape == (h, 5, 7)
    assert np.abs(maps.sum(axis=-1) - 1.0).max() < 1e-9
    assert (maps >= 0).all()


# ---------------------------------------------------------------------------
# iterative pseudoinverse


def test_pinv_identity_fixed_point():
    z = iterative_pinv(Tensor(np.eye(4)), iters=6)
    assert np.abs(z.data - np.eye(4)).max() < 1e-8


def test_pinv_diagonal_closed_form():
    z = iterative_pinv(Tensor(np.diag([2.0, 4.0])), iters=20)
    assert np.abs(z.data - np.diag([0.5, 0.25])).max() < 1e-10


@pytest.mark.parametrize("seed", range(50))
def test_pinv_residual_nonincreasing(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((6, 6)) + 0.05
    a = a / a.sum(axis=1, keepdims=True)  # row-stochastic, positive
    prev = None
    for iters in range(1, 8):
        z = iterative_pinv(Tensor(a), iters=iters).data
        res = np.linalg.norm(a @ z @ a - a)
        if prev is not None:
            assert res <= prev + 1e-12
        prev = res


def test_pinv_rejects_nonsquare():
    with pytest.raises(ValueError):
        iterative_pinv(Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------------------
# Nystrom attention


def test_nystrom_identical_tokens_equals_exact(rng):
    d, h = 8, 2
    p = make_mha(rng, d, h)
    x = np.tile(rng.standard_normal((1, d)), (12, 1))
    exact, _ = exact_mha(Tensor(x), Tensor(x), p)
    approx, _ = nystrom_mha(Tensor(x), p, landmarks=4, pinv_iters=6)
    assert np.abs(exact.data - approx.data).max() < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_nystrom_full_landmarks_matches_exact(seed):
    rng = np.random.default_rng(seed)
    d, h, n = 16, 4, 32
    p = make_mha(rng, d, h)
    x = rng.standard_normal((n, d))
    exact, _ = exact_mha(Tensor(x), Tensor(x), p)
    approx, _ = nystrom_mha(Tensor(x), p, landmarks=n, pinv_iters=30)
    assert np.abs(exact.data - approx.data).max() < 1e-3


def test_nystrom_error_decreases_with_landmarks():
    d, h, n = 16, 4, 256
    errs = {m: [] for m in (8, 32, 128)}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = make_mha(rng, d, h)
        x = rng.standard_normal((n, d))
        exact, _ = exact_mha(Tensor(x), Tensor(x), p)
        for m in errs:
            approx, _ = nystrom_mha(Tensor(x), p, landmarks=m, pinv_iters=8)
            errs[m].append(np.abs(exact.data - approx.data).mean())
    assert np.mean(errs[32]) < np.mean(errs[8])
    assert np.mean(errs[128]) <= np.mean(errs[32])


def test_nystrom_rejects_bad_landmarks(rng):
    p = make_mha(rng, 8, 2)
    x = Tensor(rng.standard_normal((4, 8)))
    with pytest.raises(ValueError):
        nystrom_mha(x, p, landmarks=5)
    with pytest.raises(ValueError):
        nystrom_mha(x, p, landmarks=0)


def test_nystrom_gradients_pass_check(rng):
    d, h = 8, 2
    p = make_mha(rng, d, h)
    probe = Tensor(rng.standard_normal((6, d)))
    def f(x):
        out, _ = nystrom_mha(x, p, landmarks=3, pinv_iters=4)
        return ad.tsum(ad.mul(out, probe))
    rep = grad_check(f, rng.standard_normal((6, d)))
    assert rep.max_rel_error < 1e-4


# ---------------------------------------------------------------------------
# transformer block


def test_block_zero_weights_identity(rng):
    d, h, dff = 8, 2, 16
    p = BlockParams(
        mha=MhaParams(*(Tensor(np.zeros((d, d))) for _ in range(4)), heads=h),
        ln1_g=Tensor(np.ones(d)), ln1_b=Tensor(np.zeros(d)),
        ffn_w1=Tensor(np.zeros((d, dff))), ffn_b1=Tensor(np.zeros(dff)),
        ffn_w2=Tensor(np.zeros((dff, d))), ffn_b2=Tensor(np.zeros(d)),
        ln2_g=Tensor(np.ones(d)), ln2_b=Tensor(np.zeros(d)))
    x = rng.standard_normal((5, d))
    out, _ = transformer_block(Tensor(x), p)
    assert np.abs(out.data - x).max() < 1e-15


def test_block_single_row(rng):
    p = make_block(rng, 8, 2, 16)
    x = rng.standard_normal((1, 8))
    out, maps = transformer_block(Tensor(x), p)
    assert out.data.shape == (1, 8)
    assert maps.shape == (2, 1, 1)
    assert np.allclose(maps, 1.0)


def test_block_matches_composed_reference(rng):
    # reference built from the same primitive pieces, composed by hand
    d, h, dff = 8, 2, 16
    p = make_block(rng, d, h, dff)
    x = rng.standard_normal((4, d))
    out, _ = transformer_block(Tensor(x), p)

    a = ad.layer_norm(Tensor(x), p.ln1_g, p.ln1_b)
    ref_out, _ = dense_reference_mha(a.data, a.data, p.mha)
    x1 = x + ref_out
    f = ad.layer_norm(Tensor(x1), p.ln2_g, p.ln2_b)
    ref_ffn = ffn_apply(f, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2)
    ref = x1 + ref_ffn.data
    assert np.abs(out.data - ref).max() < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_block_grad_check_end_to_end(seed):
    rng = np.random.default_rng(seed)
    d = 8
    p = make_block(rng, d, 2, 16)
    probe = Tensor(rng.standard_normal((3, d)))
    def f(x):
        out, _ = transformer_block(x, p)
        return ad.tsum(ad.mul(out, probe))
    rep = grad_check(f, rng.standard_normal((3, d)))
    assert rep.max_rel_error < 1e-4


def test_block_rejects_unknown_kind(rng):
    p = make_block(rng, 8, 2, 16)
    with pytest.raises(ValueError):
        transformer_block(Tensor(rng.standard_normal((3, 8))), p, attn_kind="linear")
