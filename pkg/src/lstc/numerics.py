"""Dense float64 operators with hand-written backward passes.

Matrices are plain 2-D ``float64`` numpy arrays. Every forward kernel uses a
fixed accumulation order and never dispatches to BLAS, so results are
bitwise reproducible regardless of thread settings.

Each differentiable operator is a small object with ``forward`` (records what
the backward pass needs) and ``backward`` (returns one vector-Jacobian product
per forward input, in argument order).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError, StateError

DTYPE = np.float64


def as_matrix(x, name="matrix") -> np.ndarray:
    """Validate external input: 2-D, float64, finite, C-contiguous copy."""
    m = np.array(x, dtype=DTYPE, copy=True)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} contains NaN or Inf")
    return np.ascontiguousarray(m)


def zeros(rows, cols) -> np.ndarray:
    return np.zeros((rows, cols), dtype=DTYPE)


def _shape(m):
    return f"{m.shape[0]}x{m.shape[1]}"


def _check_2d(*ms):
    for m in ms:
        if m.ndim != 2:
            raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_2d(a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {_shape(a)} @ {_shape(b)}")
    m, k = a.shape
    n = b.shape[1]
    if k == 0:
        return zeros(m, n)
    # unoptimized einsum runs numpy's own single-threaded loops, never BLAS,
    # so the accumulation order is fixed
    return np.einsum("ik,kj->ij", a, b)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    _check_2d(m)
    if m.shape[1] == 0:
        raise DimensionError("softmax over zero columns is undefined")
    if m.shape[0] == 0:
        return zeros(0, m.shape[1])
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def linear(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _check_2d(x, w, bias)
    if bias.shape != (1, w.shape[1]):
        raise DimensionError(f"bias must be 1x{w.shape[1]}, got {_shape(bias)}")
    return matmul(x, w) + bias


def layer_norm(x, gamma, beta, eps=1e-5) -> np.ndarray:
    return _layer_norm_parts(x, gamma, beta, eps)[0]


def _layer_norm_parts(x, gamma, beta, eps):
    _check_2d(x, gamma, beta)
    d = x.shape[1]
    if d < 1:
        raise DimensionError("layer_norm needs at least one column")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise DimensionError(
            f"layer_norm affine params must be 1x{d}, got {_shape(gamma)} and {_shape(beta)}")
    centered = x - x.mean(axis=1, keepdims=True)
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    return xhat * gamma + beta, xhat, inv


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def concat_cols(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_2d(a, b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat row mismatch: {_shape(a)} vs {_shape(b)}")
    return np.concatenate([a, b], axis=1)


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"elementwise shape mismatch: {_shape(a)} vs {_shape(b)}")
    return a * b


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.value.ndim != 2:
            raise DimensionError(f"Param must be 2-D, got shape {self.value.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError("Param grad shape must match value shape")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def accumulate(self, g):
        self.grad += g


class ParamGroup:
    """Mixin for parameter containers.

    Subclasses list their fields in ``_fields``; entries may be Params,
    ParamGroups or lists of ParamGroups. Names are dotted paths in declared
    order, which is also the checkpoint order.
    """

    _fields: tuple = ()

    def named_params(self, prefix=""):
        for f in self._fields:
            item = getattr(self, f)
            name = f"{prefix}{f}"
            if isinstance(item, Param):
                yield name, item
            elif isinstance(item, ParamGroup):
                yield from item.named_params(name + ".")
            else:
                for i, sub in enumerate(item):
                    yield from sub.named_params(f"{name}.{i}.")

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()


# ---------------------------------------------------------------------------
# differentiable operators


class Op:
    name = "op"

    def __init__(self):
        self._saved = None

    def __call__(self, *args):
        return self.forward(*args)

    def _load(self):
        if self._saved is None:
            raise StateError(f"{self.name}: backward called before forward")
        return self._saved


class MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        out = matmul(a, b)
        self._saved = (a, b)
        return out

    def backward(self, g):
        a, b = self._load()
        return matmul(g, b.T), matmul(a.T, g)


class SoftmaxRows(Op):
    name = "softmax_rows"

    def forward(self, m):
        p = softmax_rows(m)
        self._saved = p
        return p

    def backward(self, g):
        p = self._load()
        # diag(p) - p p^T applied row by row
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)


class Linear(Op):
    name = "linear"

    def forward(self, x, w, bias):
        out = linear(x, w, bias)
        self._saved = (x, w)
        return out

    def backward(self, g):
        x, w = self._load()
        return matmul(g, w.T), matmul(x.T, g), g.sum(axis=0, keepdims=True)


class LayerNorm(Op):
    name = "layer_norm"

    def __init__(self, eps=1e-5):
        super().__init__()
        self.eps = eps

    def forward(self, x, gamma, beta):
        out, xhat, inv = _layer_norm_parts(x, gamma, beta, self.eps)
        self._saved = (xhat, inv, gamma)
        return out

    def backward(self, g):
        xhat, inv, gamma = self._load()
        d = xhat.shape[1]
        gx = g * gamma
        dx = inv / d * (d * gx - gx.sum(axis=1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)


class Mul(Op):
    name = "mul"

    def forward(self, a, b):
        out = mul(a, b)
        self._saved = (a, b)
        return out

    def backward(self, g):
        a, b = self._load()
        return g * b, g * a


class ConcatCols(Op):
    name = "concat_cols"

    def forward(self, a, b):
        out = concat_cols(a, b)
        self._saved = a.shape[1]
        return out

    def backward(self, g):
        split = self._load()
        return g[:, :split].copy(), g[:, split:].copy()


class Sigmoid(Op):
    name = "sigmoid"

    def forward(self, x):
        s = sigmoid(x)
        self._saved = s
        return s

    def backward(self, g):
        s = self._load()
        return (g * s * (1.0 - s),)


class ReLU(Op):
    name = "relu"

    def forward(self, x):
        self._saved = x > 0
        return relu(x)

    def backward(self, g):
        mask = self._load()
        return (g * mask,)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradReport:
    op_name: str
    max_rel_err: float
    per_param_err: list

    def passed(self, tol=1e-5):
        return self.max_rel_err < tol

    def __str__(self):
        worst = ", ".join(f"{n}={e:.2e}" for n, e in self.per_param_err)
        return f"{self.op_name}: max_rel_err={self.max_rel_err:.3e} [{worst}]"


def rel_err(a, n, floor=1e-12):
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(f: Callable[[], float], params, eps=1e-5, op_name="f", floor=1e-12) -> GradReport:
    """Compare analytic gradients against central differences.

    ``f`` is called with no arguments, must return the scalar loss and must
    accumulate its analytic gradient into each ``Param.grad``. ``params`` is a
    mapping or a sequence of ``(name, Param)`` pairs.

    ``floor`` bounds the denominator of the relative error. Central
    differences carry roughly ``1e-16 * |loss| / eps`` of cancellation noise,
    so gradient entries far below that noise cannot meet a pure relative
    tolerance; raising the floor turns the check absolute for them.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"grad_check eps must lie in [1e-7, 1e-3], got {eps}")
    named = list(params.items()) if isinstance(params, Mapping) else list(params)

    for _, p in named:
        p.zero_grad()
    base = f()
    if not math.isfinite(base):
        raise NumericalError(f"{op_name}: non-finite loss at the unperturbed point")
    analytic = [p.grad.copy() for _, p in named]

    per_param = []
    for (name, p), ga in zip(named, analytic):
        worst = 0.0
        flat = p.value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = f()
            flat[idx] = orig - eps
            down = f()
            flat[idx] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericalError(f"{op_name}: non-finite loss perturbing {name}[{idx}]")
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, rel_err(ga.reshape(-1)[idx], numeric, floor))
        per_param.append((name, worst))
    for (_, p), ga in zip(named, analytic):
        p.grad[...] = ga
    max_err = max((e for _, e in per_param), default=0.0)
    return GradReport(op_name, max_err, per_param)


def check_op(op: Op, inputs: Sequence[np.ndarray], names: Iterable[str] = None,
             eps=1e-5, seed=0) -> GradReport:
    """Gradient-check one operator through a random linear probe of its output."""
    names = list(names) if names is not None else [f"in{i}" for i in range(len(inputs))]
    params = [(n, Param(np.array(x, dtype=DTYPE))) for n, x in zip(names, inputs)]
    probe = None

    def loss():
        nonlocal probe
        out = op.forward(*[p.value for _, p in params])
        if probe is None:
            probe = np.random.default_rng(seed).normal(size=out.shape)
        grads = op.backward(probe)
        for (_, p), g in zip(params, grads):
            p.accumulate(g)
        return float((out * probe).sum())

    return grad_check(loss, params, eps=eps, op_name=op.name)
