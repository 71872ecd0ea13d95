"""Late fusion of branch logits and the per-class binary cross-entropy loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericalError
from .numerics import sigmoid

CLAMP = 1e-12


@dataclass(frozen=True)
class ContextLogits:
    z_s: np.ndarray
    z_l: np.ndarray

    def __post_init__(self):
        if self.z_s.shape != self.z_l.shape:
            raise DimensionError(f"logit blocks differ in shape: {self.z_s.shape} vs {self.z_l.shape}")


def fuse(z) -> np.ndarray:
    """Class probabilities from summed branch logits (multi-label, so per-class sigmoid)."""
    if not isinstance(z, ContextLogits):
        z = ContextLogits(*z)
    return sigmoid(z.z_s + z.z_l)


def check_labels(y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be a 2-D binary matrix")
    return y


def bce_loss(probs: np.ndarray, labels) -> tuple:
    """Mean BCE over all N*c cells and its gradient w.r.t. the fused logits."""
    y = check_labels(labels)
    if probs.shape != y.shape:
        raise DimensionError(f"probs {probs.shape} vs labels {y.shape}")
    if probs.size == 0:
        raise ValueError("bce_loss over zero actors is undefined")
    p = np.clip(probs, CLAMP, 1.0 - CLAMP)
    cells = p.size
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / cells
    return float(loss), (probs - y) / cells


def predict(probs: np.ndarray, threshold=0.5) -> tuple:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (probs >= threshold).astype(np.float64), probs.copy()


def fused_loss(z_s, z_l, labels) -> tuple:
    """BCE of the fused probabilities; returns (loss, probs, grad for each block).

    Fusion is additive, so both blocks receive the same gradient.
    """
    probs = fuse(ContextLogits(z_s, z_l))
    loss, g = bce_loss(probs, labels)
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss")
    return loss, probs, g
