import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfuse import autodiff as ad
from mmfuse.autodiff import Param, Tensor, grad_check


def test_softmax_symmetry():
    out = ad.softmax(Tensor([0.0, 0.0]), temperature=1.0)
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_softmax_log_inputs():
    out = ad.softmax(Tensor([math.log(1), math.log(2), math.log(3)]))
    assert np.allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_temperature_matches_direct_evaluation():
    # scalar arithmetic oracle: softmax([2,0], T=4) = [e^.5, 1] / (e^.5 + 1)
    e = math.exp(0.5)
    expected = np.array([e / (e + 1.0), 1.0 / (e + 1.0)])
    out = ad.softmax(Tensor([2.0, 0.0]), temperature=4.0)
    assert np.allclose(out.data, expected, atol=1e-15)


def test_softmax_rows_sum_to_one_and_positive(rng):
    x = rng.standard_normal((5, 7)) * 10
    out = ad.softmax(Tensor(x), axis=-1).data
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert (out > 0).all() and (out < 1).all()


def test_softmax_shift_invariance(rng):
    x = rng.standard_normal(9)
    a = ad.softmax(Tensor(x)).data
    b = ad.softmax(Tensor(x + 123.456)).data
    assert np.abs(a - b).max() < 1e-12


def test_softmax_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        ad.softmax(Tensor([np.nan, 1.0]))
    with pytest.raises(FloatingPointError):
        ad.softmax(Tensor([np.inf, 1.0]))


def test_softmax_rejects_bad_temperature():
    with pytest.raises(ValueError):
        ad.softmax(Tensor([1.0, 2.0]), temperature=0.0)


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=30, deadline=None)
def test_softmax_shift_invariance_property(seed):
    x = np.random.Generator(np.random.Philox(seed)).standard_normal(6) * 5
    a = ad.softmax(Tensor(x)).data
    b = ad.softmax(Tensor(x + 42.0)).data
    assert np.abs(a - b).max() < 1e-12


# ---------------------------------------------------------------------------
# grad_check: every differentiable op


def test_grad_check_sum_of_squares(rng):
    rep = grad_check(lambda x: ad.tsum(ad.mul(x, x)), rng.standard_normal((3, 4)))
    assert rep.max_rel_error < 1e-6
    assert not rep.skipped


def test_grad_check_softmax_dot(rng):
    w = Tensor(rng.standard_normal(8))
    rep = grad_check(lambda x: ad.tsum(ad.mul(ad.softmax(x), w)),
                     rng.standard_normal(8))
    assert rep.max_rel_error < 1e-4


OPS = {
    "add": lambda x, p: ad.tsum(ad.mul(ad.add(x, p), ad.add(x, p))),
    "sub": lambda x, p: ad.tsum(ad.mul(ad.sub(x, p), ad.sub(x, p))),
    "mul": lambda x, p: ad.tsum(ad.mul(x, ad.mul(x, p))),
    "div": lambda x, p: ad.tsum(ad.div(x, ad.add(ad.mul(p, p), Tensor(np.ones(p.shape))))),
    "neg": lambda x, p: ad.tsum(ad.mul(ad.neg(x), p)),
    "exp": lambda x, p: ad.tsum(ad.mul(ad.exp(x), p)),
    "sigmoid": lambda x, p: ad.tsum(ad.mul(ad.sigmoid(x), p)),
    "tanh": lambda x, p: ad.tsum(ad.mul(ad.tanh(x), p)),
    "gelu": lambda x, p: ad.tsum(ad.mul(ad.gelu(x), p)),
    "log_softmax": lambda x, p: ad.tsum(ad.mul(ad.log_softmax(x, temperature=3.0), p)),
    "matmul": lambda x, p: ad.tsum(ad.mul(ad.matmul(x, ad.transpose_last2(x)), p)),
}


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_core_ops_many_seeds(seed):
    rng = np.random.Generator(np.random.Philox(seed))
    x = rng.standard_normal((4, 4))
    probe = Tensor(rng.standard_normal((4, 4)))
    for name, f in OPS.items():
        rep = grad_check(lambda t: f(t, probe), x, eps=1e-5)
        assert rep.max_rel_error < 1e-4, f"{name} failed at seed {seed}: {rep}"


def test_grad_check_log_and_clip(rng):
    x = np.abs(rng.standard_normal((3, 3))) + 0.5
    probe = Tensor(rng.standard_normal((3, 3)))
    rep = grad_check(lambda t: ad.tsum(ad.mul(ad.log(ad.clip_min(t, 1e-12)), probe)), x)
    assert rep.max_rel_error < 1e-4


def test_grad_check_reductions_and_shapes(rng):
    x = rng.standard_normal((4, 6))
    probe = Tensor(rng.standard_normal((2, 12)))
    def f(t):
        r = ad.reshape(t, (2, 12))
        return ad.tsum(ad.mul(r, probe))
    assert grad_check(f, x).max_rel_error < 1e-6
    probe2 = Tensor(rng.standard_normal(4))
    def g(t):
        return ad.tsum(ad.mul(ad.tsum(t, axis=1), probe2))
    assert grad_check(g, x).max_rel_error < 1e-6
    def h(t):
        return ad.tsum(ad.mul(ad.concat_rows([ad.rows(t, 0, 2), ad.rows(t, 2, 4)]),
                              Tensor(np.ones((4, 6)))))
    assert grad_check(h, x).max_rel_error < 1e-6


def test_grad_check_heads_roundtrip(rng):
    x = rng.standard_normal((3, 8))
    probe = Tensor(rng.standard_normal((3, 8)))
    def f(t):
        return ad.tsum(ad.mul(ad.from_heads(ad.to_heads(t, 2)), probe))
    assert grad_check(f, x).max_rel_error < 1e-9


def test_grad_check_layer_norm_all_args(rng):
    x = rng.standard_normal((4, 6))
    gain = np.ones(6) * 1.3
    bias = rng.standard_normal(6) * 0.1
    probe = Tensor(rng.standard_normal((4, 6)))
    assert grad_check(lambda t: ad.tsum(ad.mul(ad.layer_norm(t, Tensor(gain), Tensor(bias)), probe)),
                      x).max_rel_error < 1e-4
    assert grad_check(lambda t: ad.tsum(ad.mul(ad.layer_norm(Tensor(x), t, Tensor(bias)), probe)),
                      gain).max_rel_error < 1e-4
    assert grad_check(lambda t: ad.tsum(ad.mul(ad.layer_norm(Tensor(x), Tensor(gain), t), probe)),
                      bias).max_rel_error < 1e-4


def test_grad_check_linear_direct_accumulation(rng):
    # linear() accumulates weight gradients straight into Param.grad
    x = rng.standard_normal((5, 3))
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)
    probe = Tensor(rng.standard_normal((5, 4)))
    assert grad_check(lambda t: ad.tsum(ad.mul(ad.linear(Tensor(x), t, Tensor(b)), probe)),
                      w).max_rel_error < 1e-6
    assert grad_check(lambda t: ad.tsum(ad.mul(ad.linear(Tensor(x), Tensor(w), t), probe)),
                      b).max_rel_error < 1e-6


def test_grad_check_eps_bounds(rng):
    with pytest.raises(ValueError):
        grad_check(lambda t: ad.tsum(t), rng.standard_normal(3), eps=1e-2)


def test_param_accumulates_across_backward():
    p = Param(np.array([2.0]), name="w")
    for _ in range(2):
        loss = ad.tsum(ad.mul(p, p))
        loss.backward()
    assert np.allclose(p.grad, [8.0])  # 2 backward passes of d(x^2)=2x=4
    p.zero_grad()
    assert np.all(p.grad == 0.0)


def test_shared_subexpression_grad():
    # same tensor used twice: gradients add
    p = Param(np.array([3.0]), name="w")
    loss = ad.tsum(ad.mul(p, p))  # d/dp = 2p = 6
    loss.backward()
    assert np.allclose(p.grad, [6.0])


def test_finite_invariant_after_ops(rng):
    x = Tensor(rng.standard_normal((4, 4)))
    y = ad.softmax(ad.mul(x, x), axis=-1)
    assert np.isfinite(y.data).all()
