import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstc.errors import DimensionError, StateError
from lstc.long_term import (
    FeatureWindow, LongTermBranch, LongTermParams, NLAttention, NLBlockParams, ReaderUnit,
    ReaderUnitParams, SecondOrderDecoupled, SecondOrderHead, long_term_logits, nl_attention,
    nl_weights, reader_unit, second_order_decoupled, second_order_full,
)
from lstc.numerics import Param, grad_check, layer_norm


def zero_block(d, d_k):
    z = lambda r, c: Param(np.zeros((r, c)))
    return NLBlockParams(z(d, d_k), z(1, d_k), z(d, d_k), Param(np.eye(d)), z(1, d))


def test_single_context_row_returns_its_value():
    rng = np.random.default_rng(0)
    p = NLBlockParams.init(4, 2, rng)
    ctx = rng.normal(size=(1, 4))
    out = nl_attention(rng.normal(size=(3, 4)), ctx, p)
    expected = ctx @ p.g.value + p.g_b.value
    np.testing.assert_allclose(out, np.repeat(expected, 3, axis=0), atol=1e-14)


def test_zero_projections_average_the_context():
    rng = np.random.default_rng(1)
    ctx = rng.normal(size=(5, 3))
    out = nl_attention(rng.normal(size=(2, 3)), ctx, zero_block(3, 2))
    np.testing.assert_allclose(out, np.repeat(ctx.mean(axis=0, keepdims=True), 2, axis=0), atol=1e-14)


def test_nl_matches_loop_oracle():
    rng = np.random.default_rng(2)
    p = NLBlockParams.init(4, 3, rng)
    q, ctx = rng.normal(size=(2, 4)), rng.normal(size=(5, 4))
    out = nl_attention(q, ctx, p)
    g = ctx @ p.g.value + p.g_b.value
    for i in range(2):
        qt = q[i] @ p.theta.value + p.theta_b.value[0]
        s = np.array([math.exp(qt @ (ctx[j] @ p.phi.value) / math.sqrt(3)) for j in range(5)])
        np.testing.assert_allclose(out[i], (s[:, None] * g).sum(axis=0) / s.sum(), atol=1e-13)


def test_empty_context():
    rng = np.random.default_rng(3)
    p = NLBlockParams.init(4, 2, rng)
    q = rng.normal(size=(2, 4))
    empty = FeatureWindow.empty(4)
    assert np.array_equal(nl_attention(q, empty, p), np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        second_order_full(q, empty, SecondOrderHead(p, p))
    op = NLAttention(p)
    op.forward(q, empty)
    dq, dc = op.backward(np.ones((2, 4)))
    assert dq.shape == (2, 4) and dc.shape == (0, 4) and not dq.any()


def test_context_dimension_mismatch():
    rng = np.random.default_rng(4)
    p = NLBlockParams.init(4, 2, rng)
    with pytest.raises(DimensionError):
        nl_attention(np.zeros((1, 4)), np.zeros((2, 3)), p)
    with pytest.raises(DimensionError):
        FeatureWindow(np.zeros((2, 4)), (1,))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16), st.integers(1, 6))
def test_context_permutation_invariance_and_convex_hull(seed, length):
    rng = np.random.default_rng(seed)
    p = NLBlockParams.init(4, 2, rng, scale=2.0)
    q, ctx = rng.normal(size=(3, 4)), rng.normal(size=(length, 4))
    perm = rng.permutation(length)
    out = nl_attention(q, ctx, p)
    np.testing.assert_allclose(nl_attention(q, ctx[perm], p), out, atol=1e-12)
    w = nl_weights(q, ctx, p)
    assert np.max(np.abs(w.sum(axis=1) - 1)) <= 1e-12
    g = ctx @ p.g.value + p.g_b.value
    assert np.all(out >= g.min(axis=0) - 1e-12)
    assert np.all(out <= g.max(axis=0) + 1e-12)


def test_second_order_single_row():
    rng = np.random.default_rng(5)
    head = SecondOrderHead.init(3, 2, rng)
    ctx = rng.normal(size=(1, 3))
    g1 = ctx @ head.nl1.g.value + head.nl1.g_b.value
    g2 = ctx @ head.nl2.g.value + head.nl2.g_b.value
    out = second_order_full(rng.normal(size=(2, 3)), ctx, head)
    np.testing.assert_allclose(out, np.repeat(g1 * g2, 2, axis=0), atol=1e-14)


@pytest.mark.parametrize("seed", range(100))
def test_second_order_full_equals_decoupled(seed):
    rng = np.random.default_rng(seed)
    n, length = int(rng.integers(1, 5)), int(rng.integers(1, 9))
    d, d_k = int(rng.integers(1, 17)), int(rng.integers(1, 9))
    head = SecondOrderHead.init(d, d_k, rng, scale=2.0)
    q, ctx = rng.normal(size=(n, d)), rng.normal(size=(length, d))
    diff = np.abs(second_order_full(q, ctx, head) - second_order_decoupled(q, ctx, head))
    assert diff.max() < 1e-9


def test_reader_unit_zero_beta_ignores_context():
    rng = np.random.default_rng(6)
    p = ReaderUnitParams.init(4, 2, 2, rng)
    p.beta.value[...] = 0.0
    q = rng.normal(size=(2, 4))
    a = reader_unit(q, rng.normal(size=(3, 4)), p)
    b = reader_unit(q, rng.normal(size=(6, 4)), p)
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_reader_unit_composed_oracle():
    rng = np.random.default_rng(7)
    p = ReaderUnitParams.init(4, 2, 3, rng)
    q, ctx = rng.normal(size=(2, 4)), rng.normal(size=(5, 4))
    attn = sum(p.beta.value[0, m] * second_order_full(q, ctx, h) for m, h in enumerate(p.heads))
    u = layer_norm(q + attn, p.ln1_gamma.value, p.ln1_beta.value, 1e-5)
    hidden = np.maximum(u @ p.ffn_w1.value + p.ffn_b1.value, 0) @ p.ffn_w2.value + p.ffn_b2.value
    expected = layer_norm(u + hidden, p.ln2_gamma.value, p.ln2_beta.value, 1e-5)
    np.testing.assert_allclose(reader_unit(q, ctx, p), expected, atol=1e-12)


def test_cascade_shapes_and_functional_match():
    rng = np.random.default_rng(8)
    p = LongTermParams.init(6, 4, rng, k=3, m=2)
    assert (p.k, p.m, p.d, p.d_k, p.c) == (3, 2, 6, 3, 4)
    q, ctx = rng.normal(size=(2, 6)), rng.normal(size=(4, 6))
    out = LongTermBranch(p).forward(q, FeatureWindow(ctx))
    assert out.shape == (2, 4)
    np.testing.assert_allclose(out, long_term_logits(q, ctx, p), atol=1e-13)


def test_param_shape_validation():
    rng = np.random.default_rng(9)
    p = NLBlockParams.init(4, 2, rng)
    with pytest.raises(DimensionError):
        NLBlockParams(p.theta, p.theta_b, Param(np.zeros((4, 3))), p.g, p.g_b)
    with pytest.raises(DimensionError):
        ReaderUnitParams([], Param(np.zeros((1, 0))), *[Param(np.zeros((1, 4)))] * 4,
                         p.g, p.g_b, p.g, p.g_b)


def test_backward_before_forward():
    rng = np.random.default_rng(10)
    p = LongTermParams.init(4, 2, rng, k=1, m=1)
    for mod in (NLAttention(p.units[0].heads[0].nl1), SecondOrderDecoupled(p.units[0].heads[0]),
                ReaderUnit(p.units[0]), LongTermBranch(p)):
        with pytest.raises(StateError):
            mod.backward(np.zeros((1, 4)))


def _check(module_factory, params, q, ctx, out_cols, seed, floor=1e-12):
    rng = np.random.default_rng(seed + 1000)
    probe = rng.normal(size=(q.shape[0], out_cols))
    qp, cp = Param(q.copy()), Param(ctx.copy())

    def f():
        mod = module_factory()
        out = mod.forward(qp.value, cp.value)
        dq, dc = mod.backward(probe)
        qp.accumulate(dq)
        cp.accumulate(dc)
        return float((out * probe).sum())

    named = list(params.named_params()) + [("q", qp), ("ctx", cp)]
    return grad_check(f, named, eps=1e-5, floor=floor)


@pytest.mark.parametrize("seed", range(20))
def test_nl_and_second_order_gradients(seed):
    rng = np.random.default_rng(seed)
    head = SecondOrderHead.init(4, 2, rng)
    q, ctx = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    r = _check(lambda: NLAttention(head.nl1), head.nl1, q, ctx, 4, seed)
    assert r.max_rel_err < 1e-5, str(r)
    r = _check(lambda: SecondOrderDecoupled(head), head, q, ctx, 4, seed)
    assert r.max_rel_err < 1e-5, str(r)


@pytest.mark.parametrize("seed", range(20))
def test_reader_unit_gradients(seed):
    rng = np.random.default_rng(seed)
    unit = ReaderUnitParams.init(4, 2, 2, rng)
    unit.beta.value[...] = rng.uniform(0.2, 1.0, size=(1, 2))
    q, ctx = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    # layer norm pushes some entries to ~1e-6, below the central-difference
    # noise of a unit-scale loss, so those are compared absolutely
    r = _check(lambda: ReaderUnit(unit), unit, q, ctx, 4, seed, floor=1e-4)
    assert r.max_rel_err < 1e-5, str(r)
