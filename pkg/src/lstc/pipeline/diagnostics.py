"""Numerical self-checks shared by the CLI, the experiment scripts and the tests:
the finite-difference gradient suite, the second-order oracle comparison and
the long-term complexity timing.
"""
from __future__ import annotations

import time

import numpy as np

from ..fusion import bce_loss, fuse
from ..long_term import (
    FeatureWindow, LongTermBranch, LongTermParams, NLAttention, ReaderUnit, ReaderUnitParams,
    SecondOrderDecoupled, SecondOrderHead, second_order_decoupled, second_order_full,
)
from ..numerics import (
    ConcatCols, LayerNorm, Linear, MatMul, Mul, Param, ReLU, Sigmoid, SoftmaxRows,
    check_op, grad_check,
)
from ..short_term import ClipFeatureMap, ShortTermBranch, ShortTermParams
from .model import ModelState


def _primitive_cases(rng):
    r = lambda *s: rng.normal(size=s)
    relu_in = r(3, 4)
    relu_in[np.abs(relu_in) < 1e-3] = 0.5  # stay off the kink
    return [
        (MatMul(), [r(3, 4), r(4, 2)]),
        (SoftmaxRows(), [r(3, 5)]),
        (Linear(), [r(3, 4), r(4, 2), r(1, 2)]),
        (LayerNorm(), [r(3, 4), r(1, 4), r(1, 4)]),
        (Mul(), [r(2, 3), r(2, 3)]),
        (ConcatCols(), [r(2, 3), r(2, 2)]),
        (Sigmoid(), [r(3, 3)]),
        (ReLU(), [relu_in]),
    ]


def _module_check(name, make, params, inputs, rng, eps):
    """Probe-loss check of a (q, ctx)-style module, including input gradients."""
    probe = None
    ins = [Param(x.copy()) for x in inputs]

    def f():
        nonlocal probe
        mod = make()
        out = mod.forward(*[p.value for p in ins])
        if probe is None:
            probe = rng.normal(size=out.shape)
        for p, g in zip(ins, mod.backward(probe)):
            p.accumulate(g)
        return float((out * probe).sum())

    named = list(params.named_params()) + [(f"input{i}", p) for i, p in enumerate(ins)]
    return grad_check(f, named, eps=eps, op_name=name)


def stage2_loss_check(seed=0, eps=1e-5):
    """End-to-end stage-2 loss on N=2 actors, a 2x2x2 grid, d=6, c=4, K=M=2, L=3."""
    rng = np.random.default_rng(seed)
    d, c = 6, 4
    model = ModelState.init(d, c, rng, k=2, m=2)
    model.stage = 2
    fmap = ClipFeatureMap(2, 2, 2, rng.normal(size=(8, d)))
    feats = rng.normal(size=(2, d))
    window = FeatureWindow(rng.normal(size=(3, d)))
    labels = (rng.random((2, c)) < 0.5).astype(np.float64)

    def f():
        st, lt = model.branches()
        z_s = st.forward(fmap, feats)
        z_l = lt.forward(feats, window)
        loss, g = bce_loss(fuse((z_s, z_l)), labels)
        st.backward(g)
        lt.backward(g)
        return loss

    return grad_check(f, list(model.named_params()), eps=eps, op_name="stage2_loss")


def gradient_suite(seed=0, eps=1e-5) -> list:
    """GradReports for every differentiable op, branch and the full stage-2 loss."""
    rng = np.random.default_rng(seed)
    reports = [check_op(op, inputs, eps=eps, seed=seed) for op, inputs in _primitive_cases(rng)]

    d, d_k = 4, 2
    q, ctx = rng.normal(size=(2, d)), rng.normal(size=(3, d))
    head = SecondOrderHead.init(d, d_k, rng)
    reports.append(_module_check("nl_attention", lambda: NLAttention(head.nl1), head.nl1,
                                 [q, ctx], rng, eps))
    reports.append(_module_check("second_order_decoupled", lambda: SecondOrderDecoupled(head),
                                 head, [q, ctx], rng, eps))
    unit = ReaderUnitParams.init(d, d_k, 2, rng)
    reports.append(_module_check("reader_unit", lambda: ReaderUnit(unit), unit, [q, ctx], rng, eps))
    lt = LongTermParams.init(d, 3, rng, k=2, m=2)
    reports.append(_module_check("long_term", lambda: LongTermBranch(lt), lt, [q, ctx], rng, eps))

    sp = ShortTermParams.init(d, 3, rng)
    fmap_x = rng.normal(size=(8, d))

    class _Short:
        def __init__(self):
            self.br = ShortTermBranch(sp)

        def forward(self, x, v):
            return self.br.forward(ClipFeatureMap(2, 2, 2, x), v)

        def backward(self, g):
            dv, dx = self.br.backward(g)
            return dx, dv

    reports.append(_module_check("short_term", _Short, sp, [fmap_x, q], rng, eps))

    zs, zl = Param(rng.normal(size=(2, 3))), Param(rng.normal(size=(2, 3)))
    y = (rng.random((2, 3)) < 0.5).astype(np.float64)

    def fused():
        loss, g = bce_loss(fuse((zs.value, zl.value)), y)
        zs.accumulate(g)
        zl.accumulate(g)
        return loss

    reports.append(grad_check(fused, {"z_s": zs, "z_l": zl}, eps=eps, op_name="fused_bce"))
    reports.append(stage2_loss_check(seed, eps))
    return reports


# ---------------------------------------------------------------------------
# second-order oracle and complexity


def oracle_trials(trials=100, max_l=8, seed=0, max_n=4, max_d=16, max_dk=8):
    """Rows of (L, time_full, time_decoupled, max_abs_diff) on random instances."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(trials):
        n = int(rng.integers(1, max_n + 1))
        length = int(rng.integers(1, max_l + 1))
        d = int(rng.integers(1, max_d + 1))
        d_k = int(rng.integers(1, max_dk + 1))
        head = SecondOrderHead.init(d, d_k, rng, scale=2.0)
        q, ctx = rng.normal(size=(n, d)), rng.normal(size=(length, d))
        t0 = time.perf_counter()
        full = second_order_full(q, ctx, head)
        t1 = time.perf_counter()
        dec = second_order_decoupled(q, ctx, head)
        t2 = time.perf_counter()
        rows.append((length, t1 - t0, t2 - t1, float(np.abs(full - dec).max())))
    return rows


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def complexity_timings(lengths=(64, 128, 256), n=2, d=8, d_k=4, seed=0, repeats=50):
    """Median wall time of both second-order paths at each context length.

    The quadratic oracle is slow, so it gets a fifth of the repeats (at least 3).
    """
    rng = np.random.default_rng(seed)
    head = SecondOrderHead.init(d, d_k, rng)
    q = rng.normal(size=(n, d))
    out = []
    for length in lengths:
        ctx = rng.normal(size=(length, d))
        t_full = _median_time(lambda: second_order_full(q, ctx, head), max(3, repeats // 5))
        t_dec = _median_time(lambda: second_order_decoupled(q, ctx, head), repeats)
        out.append((length, t_full, t_dec))
    return out
