"""Long-term interaction modeling over a feature-bank window.

First-order NonLocal attention uses the embedded-Gaussian similarity
``exp(theta(q) . phi(c) / sqrt(d_k))`` normalized with a softmax over context
rows. Second-order attention weights every ordered pair of context rows by a
product of two such similarities and mixes ``g1(c_j) * g2(c_k)``; because the
pair weight and the pair value both factor, the double sum equals the
elementwise product of two first-order attentions. ``second_order_full`` is the
quadratic brute-force version and exists only as a test oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, StateError
from .numerics import (
    LayerNorm, Linear, MatMul, Mul, Param, ParamGroup, ReLU, SoftmaxRows,
    layer_norm, linear, matmul, relu, softmax_rows,
)

LN_EPS = 1e-5


@dataclass(frozen=True)
class FeatureWindow:
    ctx: np.ndarray
    source_timestamps: tuple = field(default=())

    def __post_init__(self):
        if self.ctx.ndim != 2:
            raise DimensionError(f"context must be 2-D, got shape {self.ctx.shape}")
        if self.source_timestamps and len(self.source_timestamps) != self.ctx.shape[0]:
            raise DimensionError("one source timestamp per context row")

    @classmethod
    def empty(cls, d):
        return cls(np.zeros((0, d)), ())

    @property
    def length(self):
        return self.ctx.shape[0]


def _ctx(ctx):
    return ctx.ctx if isinstance(ctx, FeatureWindow) else ctx


def _glorot(rng, fan_in, fan_out, scale=1.0):
    return Param(rng.normal(0.0, scale * math.sqrt(2.0 / (fan_in + fan_out)),
                            size=(fan_in, fan_out)))


class NLBlockParams(ParamGroup):
    _fields = ("theta", "theta_b", "phi", "g", "g_b")

    def __init__(self, theta, theta_b, phi, g, g_b):
        # no key-side bias: it shifts all logits of a query equally and the
        # softmax cancels it, so it would be a parameter with zero gradient
        self.theta, self.theta_b = theta, theta_b
        self.phi = phi
        self.g, self.g_b = g, g_b
        d, d_k = theta.shape
        if d_k < 1:
            raise DimensionError("d_k must be at least 1")
        for name, shape in (("theta_b", (1, d_k)), ("phi", (d, d_k)),
                            ("g", (d, d)), ("g_b", (1, d))):
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, want {shape}")

    @property
    def d(self):
        return self.theta.shape[0]

    @property
    def d_k(self):
        return self.theta.shape[1]

    @classmethod
    def init(cls, d, d_k, rng, scale=1.0):
        return cls(_glorot(rng, d, d_k, scale), Param(np.zeros((1, d_k))),
                   _glorot(rng, d, d_k, scale), _glorot(rng, d, d, scale), Param(np.zeros((1, d))))


class SecondOrderHead(ParamGroup):
    _fields = ("nl1", "nl2")

    def __init__(self, nl1: NLBlockParams, nl2: NLBlockParams):
        if nl1.d != nl2.d:
            raise DimensionError("both NonLocal blocks of a head must share d")
        self.nl1, self.nl2 = nl1, nl2

    @classmethod
    def init(cls, d, d_k, rng, scale=1.0):
        return cls(NLBlockParams.init(d, d_k, rng, scale), NLBlockParams.init(d, d_k, rng, scale))


class ReaderUnitParams(ParamGroup):
    _fields = ("heads", "beta", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
               "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")

    def __init__(self, heads, beta, ln1_gamma, ln1_beta, ln2_gamma, ln2_beta,
                 ffn_w1, ffn_b1, ffn_w2, ffn_b2):
        if len(heads) < 1:
            raise DimensionError("a reader unit needs M >= 1 heads")
        if beta.shape != (1, len(heads)):
            raise DimensionError(f"beta must be 1x{len(heads)}, got {beta.shape}")
        self.heads = list(heads)
        self.beta = beta
        self.ln1_gamma, self.ln1_beta = ln1_gamma, ln1_beta
        self.ln2_gamma, self.ln2_beta = ln2_gamma, ln2_beta
        self.ffn_w1, self.ffn_b1 = ffn_w1, ffn_b1
        self.ffn_w2, self.ffn_b2 = ffn_w2, ffn_b2

    @property
    def m(self):
        return len(self.heads)

    @classmethod
    def init(cls, d, d_k, m, rng, scale=1.0):
        heads = [SecondOrderHead.init(d, d_k, rng, scale) for _ in range(m)]
        return cls(heads, Param(np.full((1, m), 1.0 / m)),
                   Param(np.ones((1, d))), Param(np.zeros((1, d))),
                   Param(np.ones((1, d))), Param(np.zeros((1, d))),
                   _glorot(rng, d, d, scale), Param(np.zeros((1, d))),
                   _glorot(rng, d, d, scale), Param(np.zeros((1, d))))


class LongTermParams(ParamGroup):
    _fields = ("units", "head_w", "head_b")

    def __init__(self, units, head_w, head_b):
        if len(units) < 1:
            raise DimensionError("the cascade needs K >= 1 reader units")
        self.units = list(units)
        self.head_w, self.head_b = head_w, head_b

    @property
    def k(self):
        return len(self.units)

    @property
    def m(self):
        return self.units[0].m

    @property
    def d(self):
        return self.head_w.shape[0]

    @property
    def d_k(self):
        return self.units[0].heads[0].nl1.d_k

    @property
    def c(self):
        return self.head_w.shape[1]

    @classmethod
    def init(cls, d, c, rng, k=2, m=2, d_k=None, scale=1.0):
        d_k = d_k or max(1, d // 2)
        units = [ReaderUnitParams.init(d, d_k, m, rng, scale) for _ in range(k)]
        return cls(units, _glorot(rng, d, c, scale), Param(np.zeros((1, c))))


# ---------------------------------------------------------------------------
# forward functions


def nl_weights(q, ctx, p: NLBlockParams) -> np.ndarray:
    """Softmax attention weights (N x L) of one NonLocal block."""
    c = _ctx(ctx)
    if q.shape[1] != p.d or c.shape[1] != p.d:
        raise DimensionError(f"query dim {q.shape[1]} / context dim {c.shape[1]} != block dim {p.d}")
    logits = matmul(linear(q, p.theta.value, p.theta_b.value),
                    matmul(c, p.phi.value).T) / math.sqrt(p.d_k)
    return softmax_rows(logits)


def nl_attention(q, ctx, p: NLBlockParams) -> np.ndarray:
    c = _ctx(ctx)
    if c.shape[0] == 0:
        if q.shape[1] != p.d:
            raise DimensionError(f"query dim {q.shape[1]} != block dim {p.d}")
        return np.zeros((q.shape[0], p.d))
    return matmul(nl_weights(q, c, p), linear(c, p.g.value, p.g_b.value))


def second_order_full(q, ctx, head: SecondOrderHead) -> np.ndarray:
    """Brute-force pairwise second-order attention, Theta(L^2) per query."""
    c = _ctx(ctx)
    n, length = q.shape[0], c.shape[0]
    if length == 0:
        raise DimensionError("second_order_full needs a nonempty context")
    p1, p2 = head.nl1, head.nl2
    l1 = matmul(linear(q, p1.theta.value, p1.theta_b.value),
                matmul(c, p1.phi.value).T) / math.sqrt(p1.d_k)
    l2 = matmul(linear(q, p2.theta.value, p2.theta_b.value),
                matmul(c, p2.phi.value).T) / math.sqrt(p2.d_k)
    g1 = linear(c, p1.g.value, p1.g_b.value)
    g2 = linear(c, p2.g.value, p2.g_b.value)
    out = np.zeros((n, p1.d))
    for i in range(n):
        s1 = np.exp(l1[i] - l1[i].max())
        s2 = np.exp(l2[i] - l2[i].max())
        num = np.zeros(p1.d)
        den = 0.0
        for j in range(length):
            for k in range(length):
                s = s1[j] * s2[k]
                num += s * (g1[j] * g2[k])
                den += s
        out[i] = num / den
    return out


def second_order_decoupled(q, ctx, head: SecondOrderHead) -> np.ndarray:
    return nl_attention(q, ctx, head.nl1) * nl_attention(q, ctx, head.nl2)


def _ffn(x, w1, b1, w2, b2):
    return linear(relu(linear(x, w1.value, b1.value)), w2.value, b2.value)


def reader_unit(q, ctx, p: ReaderUnitParams) -> np.ndarray:
    attn = np.zeros_like(q, dtype=np.float64)
    for m, head in enumerate(p.heads):
        attn = attn + p.beta.value[0, m] * second_order_decoupled(q, ctx, head)
    u = layer_norm(q + attn, p.ln1_gamma.value, p.ln1_beta.value, LN_EPS)
    return layer_norm(u + _ffn(u, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2),
                      p.ln2_gamma.value, p.ln2_beta.value, LN_EPS)


def long_term_logits(v, ctx, p: LongTermParams) -> np.ndarray:
    q = v.v if hasattr(v, "v") else v
    for unit in p.units:
        q = reader_unit(q, ctx, unit)
    return linear(q, p.head_w.value, p.head_b.value)


# ---------------------------------------------------------------------------
# differentiable versions


class NLAttention:
    name = "nl_attention"

    def __init__(self, p: NLBlockParams):
        self.p = p
        self._ops = None

    def forward(self, q, ctx):
        p, c = self.p, _ctx(ctx)
        if q.shape[1] != p.d or c.shape[1] != p.d:
            raise DimensionError(f"query dim {q.shape[1]} / context dim {c.shape[1]} != block dim {p.d}")
        self._shape = (q.shape, c.shape)
        if c.shape[0] == 0:
            self._ops = {}
            return np.zeros((q.shape[0], p.d))
        ops = {k: cls() for k, cls in (("th", Linear), ("ph", MatMul), ("g", Linear),
                                       ("dot", MatMul), ("soft", SoftmaxRows), ("mix", MatMul))}
        self._scale = 1.0 / math.sqrt(p.d_k)
        qt = ops["th"](q, p.theta.value, p.theta_b.value)
        ct = ops["ph"](c, p.phi.value)
        gc = ops["g"](c, p.g.value, p.g_b.value)
        self.weights = ops["soft"](ops["dot"](qt, ct.T) * self._scale)
        self._ops = ops
        return ops["mix"](self.weights, gc)

    def backward(self, g):
        if self._ops is None:
            raise StateError("nl_attention: backward called before forward")
        p, ops = self.p, self._ops
        if not ops:
            qs, cs = self._shape
            return np.zeros(qs), np.zeros(cs)
        d_w, d_gc = ops["mix"].backward(g)
        (d_logit,) = ops["soft"].backward(d_w)
        d_qt, d_ctT = ops["dot"].backward(d_logit * self._scale)
        dc_g, dw, db = ops["g"].backward(d_gc)
        p.g.accumulate(dw)
        p.g_b.accumulate(db)
        dc_p, dw = ops["ph"].backward(d_ctT.T)
        p.phi.accumulate(dw)
        dq, dw, db = ops["th"].backward(d_qt)
        p.theta.accumulate(dw)
        p.theta_b.accumulate(db)
        return dq, dc_g + dc_p


class SecondOrderDecoupled:
    name = "second_order_decoupled"

    def __init__(self, head: SecondOrderHead):
        self.head = head
        self.nl1 = NLAttention(head.nl1)
        self.nl2 = NLAttention(head.nl2)
        self._mul = None

    def forward(self, q, ctx):
        self._mul = Mul()
        return self._mul(self.nl1.forward(q, ctx), self.nl2.forward(q, ctx))

    def backward(self, g):
        if self._mul is None:
            raise StateError("second_order_decoupled: backward called before forward")
        g1, g2 = self._mul.backward(g)
        dq1, dc1 = self.nl1.backward(g1)
        dq2, dc2 = self.nl2.backward(g2)
        return dq1 + dq2, dc1 + dc2


class ReaderUnit:
    name = "reader_unit"

    def __init__(self, p: ReaderUnitParams):
        self.p = p
        self.heads = [SecondOrderDecoupled(h) for h in p.heads]
        self._ops = None

    def forward(self, q, ctx):
        p = self.p
        ops = {k: cls() for k, cls in (("fc1", Linear), ("relu", ReLU), ("fc2", Linear))}
        ops["ln1"] = LayerNorm(LN_EPS)
        ops["ln2"] = LayerNorm(LN_EPS)
        self._z = [h.forward(q, ctx) for h in self.heads]
        attn = np.zeros_like(q, dtype=np.float64)
        for m, z in enumerate(self._z):
            attn = attn + p.beta.value[0, m] * z
        u = ops["ln1"](q + attn, p.ln1_gamma.value, p.ln1_beta.value)
        f = ops["fc2"](ops["relu"](ops["fc1"](u, p.ffn_w1.value, p.ffn_b1.value)),
                       p.ffn_w2.value, p.ffn_b2.value)
        self._ops = ops
        return ops["ln2"](u + f, p.ln2_gamma.value, p.ln2_beta.value)

    def backward(self, g):
        if self._ops is None:
            raise StateError("reader_unit: backward called before forward")
        p, ops = self.p, self._ops
        g_r2, dg, db = ops["ln2"].backward(g)
        p.ln2_gamma.accumulate(dg)
        p.ln2_beta.accumulate(db)
        g_h, dw, db = ops["fc2"].backward(g_r2)
        p.ffn_w2.accumulate(dw)
        p.ffn_b2.accumulate(db)
        (g_h,) = ops["relu"].backward(g_h)
        g_u, dw, db = ops["fc1"].backward(g_h)
        p.ffn_w1.accumulate(dw)
        p.ffn_b1.accumulate(db)
        g_u = g_u + g_r2
        g_r1, dg, db = ops["ln1"].backward(g_u)
        p.ln1_gamma.accumulate(dg)
        p.ln1_beta.accumulate(db)
        dq = g_r1.copy()
        dc = None
        d_beta = np.zeros_like(p.beta.value)
        for m, (head, z) in enumerate(zip(self.heads, self._z)):
            d_beta[0, m] = (g_r1 * z).sum()
            dqm, dcm = head.backward(p.beta.value[0, m] * g_r1)
            dq += dqm
            dc = dcm if dc is None else dc + dcm
        p.beta.accumulate(d_beta)
        return dq, dc


class LongTermBranch:
    """K-unit cascade followed by the affine map into class space."""

    name = "long_term"

    def __init__(self, p: LongTermParams):
        self.p = p
        self.units = [ReaderUnit(u) for u in p.units]
        self._head = None

    def forward(self, v, ctx):
        q = v.v if hasattr(v, "v") else v
        if q.shape[1] != self.p.d:
            raise DimensionError(f"actor dim {q.shape[1]} != model dim {self.p.d}")
        for unit in self.units:
            q = unit.forward(q, ctx)
        self._head = Linear()
        return self._head(q, self.p.head_w.value, self.p.head_b.value)

    def backward(self, g):
        if self._head is None:
            raise StateError("long_term: backward called before forward")
        g, dw, db = self._head.backward(g)
        self.p.head_w.accumulate(dw)
        self.p.head_b.accumulate(db)
        dc = None
        for unit in reversed(self.units):
            g, dcu = unit.backward(g)
            dc = dcu if dc is None else dc + dcu
        return g, dc
