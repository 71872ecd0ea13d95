"""Short-term local aggregation: actor-query attention over the clip grid.

The clip feature map is flattened t-major, then row (h), then column (w), so
grid cell ``(t, i, j)`` lives at row ``t*h*w + i*w + j``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, StateError
from .numerics import (
    ConcatCols, Linear, MatMul, Param, ParamGroup, ReLU, SoftmaxRows,
    as_matrix, concat_cols, linear, matmul, relu, softmax_rows,
)


@dataclass(frozen=True)
class ClipFeatureMap:
    h: int
    w: int
    t: int
    x: np.ndarray

    def __post_init__(self):
        if self.h * self.w * self.t == 0:
            raise DimensionError("clip grid must have h, w, t >= 1")
        if self.x.ndim != 2 or self.x.shape[0] != self.h * self.w * self.t:
            raise DimensionError(
                f"feature rows {self.x.shape[0]} != h*w*t = {self.h * self.w * self.t}")

    @classmethod
    def from_array(cls, x, h, w, t):
        return cls(h, w, t, as_matrix(x, "clip features"))

    @property
    def d(self):
        return self.x.shape[1]

    @property
    def cells(self):
        return self.h * self.w * self.t

    def index(self, t, i, j):
        return (t * self.h + i) * self.w + j

    def grid(self):
        """View as a (t, h, w, d) array."""
        return self.x.reshape(self.t, self.h, self.w, self.d)


def check_box(box):
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
        raise ValueError(f"invalid normalized box {box}")
    return x1, y1, x2, y2


@dataclass(frozen=True)
class ActorSet:
    v: np.ndarray
    boxes: tuple

    def __post_init__(self):
        if self.v.ndim != 2 or self.v.shape[0] != len(self.boxes):
            raise DimensionError(
                f"{len(self.boxes)} boxes for actor features of shape {self.v.shape}")
        object.__setattr__(self, "boxes", tuple(check_box(b) for b in self.boxes))

    @property
    def n(self):
        return self.v.shape[0]


def _feats(v):
    return v.v if isinstance(v, ActorSet) else v


class ShortTermParams(ParamGroup):
    _fields = ("w_a", "w_v", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "head_w", "head_b")

    def __init__(self, w_a, w_v, ffn_w1, ffn_b1, ffn_w2, ffn_b2, head_w, head_b):
        self.w_a, self.w_v = w_a, w_v
        self.ffn_w1, self.ffn_b1 = ffn_w1, ffn_b1
        self.ffn_w2, self.ffn_b2 = ffn_w2, ffn_b2
        self.head_w, self.head_b = head_w, head_b
        d = w_a.shape[0]
        c = head_w.shape[1]
        expected = {
            "w_a": (d, d), "w_v": (d, d), "ffn_w1": (2 * d, d), "ffn_b1": (1, d),
            "ffn_w2": (d, d), "ffn_b2": (1, d), "head_w": (d, c), "head_b": (1, c),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, want {shape}")

    @property
    def d(self):
        return self.w_a.shape[0]

    @property
    def c(self):
        return self.head_w.shape[1]

    @classmethod
    def init(cls, d, c, rng, scale=1.0):
        def glorot(fan_in, fan_out):
            return Param(rng.normal(0.0, scale * math.sqrt(2.0 / (fan_in + fan_out)),
                                    size=(fan_in, fan_out)))
        return cls(
            w_a=glorot(d, d), w_v=Param(np.eye(d)),
            ffn_w1=glorot(2 * d, d), ffn_b1=Param(np.zeros((1, d))),
            ffn_w2=glorot(d, d), ffn_b2=Param(np.zeros((1, d))),
            head_w=glorot(d, c), head_b=Param(np.zeros((1, c))),
        )

    @classmethod
    def zeros(cls, d, c):
        z = lambda r, k: Param(np.zeros((r, k)))
        return cls(z(d, d), z(d, d), z(2 * d, d), z(1, d), z(d, d), z(1, d), z(d, c), z(1, c))


@dataclass(frozen=True)
class AttentionMap:
    a: np.ndarray
    dims: tuple  # (h, w, t)


def _logit_scale(d, attn_scale):
    return 1.0 / math.sqrt(d) if attn_scale else 1.0


def attention_map(x: ClipFeatureMap, v, params: ShortTermParams, attn_scale=True) -> AttentionMap:
    feats = _feats(v)
    if feats.shape[1] != x.d:
        raise DimensionError(f"actor dim {feats.shape[1]} != clip dim {x.d}")
    if feats.shape[0] == 0:
        return AttentionMap(np.zeros((0, x.cells)), (x.h, x.w, x.t))
    logits = matmul(matmul(feats, params.w_a.value), x.x.T) * _logit_scale(x.d, attn_scale)
    return AttentionMap(softmax_rows(logits), (x.h, x.w, x.t))


def aggregate(a: AttentionMap, x: ClipFeatureMap, params: ShortTermParams) -> np.ndarray:
    if tuple(a.dims) != (x.h, x.w, x.t) or a.a.shape[1] != x.cells:
        raise DimensionError(f"attention dims {a.dims} do not match clip grid {(x.h, x.w, x.t)}")
    return matmul(a.a, matmul(x.x, params.w_v.value))


def short_term_logits(v, v_s: np.ndarray, params: ShortTermParams) -> np.ndarray:
    p = params
    hidden = relu(linear(concat_cols(_feats(v), v_s), p.ffn_w1.value, p.ffn_b1.value))
    merged = linear(hidden, p.ffn_w2.value, p.ffn_b2.value)
    return linear(merged, p.head_w.value, p.head_b.value)


def export_heatmap(a: AttentionMap, actor_index: int) -> np.ndarray:
    """Row ``actor_index`` reshaped to ``t`` grids of ``h x w``."""
    n = a.a.shape[0]
    if not 0 <= actor_index < n:
        raise IndexError(f"actor index {actor_index} out of range for {n} actors")
    h, w, t = a.dims
    return a.a[actor_index].reshape(t, h, w)


class ShortTermBranch:
    """Differentiable composition of attention_map, aggregate and short_term_logits."""

    name = "short_term"

    def __init__(self, params: ShortTermParams, attn_scale=True):
        self.params = params
        self.attn_scale = attn_scale
        self._ops = None

    def forward(self, x: ClipFeatureMap, v) -> np.ndarray:
        p = self.params
        feats = _feats(v)
        if feats.shape[1] != x.d or x.d != p.d:
            raise DimensionError(f"actor dim {feats.shape[1]}, clip dim {x.d}, model dim {p.d}")
        ops = {k: cls() for k, cls in (
            ("qa", MatMul), ("logit", MatMul), ("soft", SoftmaxRows), ("proj", MatMul),
            ("agg", MatMul), ("cat", ConcatCols), ("fc1", Linear), ("relu", ReLU),
            ("fc2", Linear), ("head", Linear))}
        self._scale = _logit_scale(x.d, self.attn_scale)
        qa = ops["qa"](feats, p.w_a.value)
        att = ops["soft"](ops["logit"](qa, x.x.T) * self._scale)
        v_s = ops["agg"](att, ops["proj"](x.x, p.w_v.value))
        hidden = ops["relu"](ops["fc1"](ops["cat"](feats, v_s), p.ffn_w1.value, p.ffn_b1.value))
        merged = ops["fc2"](hidden, p.ffn_w2.value, p.ffn_b2.value)
        self._ops = ops
        self.attention = AttentionMap(att, (x.h, x.w, x.t))
        return ops["head"](merged, p.head_w.value, p.head_b.value)

    def backward(self, g):
        """Accumulate parameter grads; return (d actor feats, d clip features)."""
        if self._ops is None:
            raise StateError("short_term: backward called before forward")
        p, ops = self.params, self._ops
        g, dw, db = ops["head"].backward(g)
        p.head_w.accumulate(dw)
        p.head_b.accumulate(db)
        g, dw, db = ops["fc2"].backward(g)
        p.ffn_w2.accumulate(dw)
        p.ffn_b2.accumulate(db)
        (g,) = ops["relu"].backward(g)
        g, dw, db = ops["fc1"].backward(g)
        p.ffn_w1.accumulate(dw)
        p.ffn_b1.accumulate(db)
        d_feats, d_vs = ops["cat"].backward(g)
        d_att, d_proj = ops["agg"].backward(d_vs)
        dx, dwv = ops["proj"].backward(d_proj)
        p.w_v.accumulate(dwv)
        (d_logit,) = ops["soft"].backward(d_att)
        d_qa, d_xt = ops["logit"].backward(d_logit * self._scale)
        d_f2, dwa = ops["qa"].backward(d_qa)
        p.w_a.accumulate(dwa)
        return d_feats + d_f2, dx + d_xt.T
