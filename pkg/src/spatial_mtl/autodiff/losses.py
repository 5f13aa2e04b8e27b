"""Loss functions and the weighted multitask loss composition."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result

logger = logging.getLogger(__name__)

#: probabilities are clamped to [PROB_FLOOR, 1 - PROB_FLOOR] inside bce
PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_depth: float = 0.5
    lambda_coords: float = 0.5
    lambda_edges: float = 0.5

    def __post_init__(self):
        for name in ("lambda_depth", "lambda_coords", "lambda_edges"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class LossBreakdown:
    classification: float
    depth: float
    coords: float
    edges: float
    total: float

    def recompute_total(self, weights: LossWeights) -> float:
        return (self.classification + weights.lambda_depth * self.depth
                + weights.lambda_coords * self.coords + weights.lambda_edges * self.edges)

    def as_dict(self) -> dict[str, float]:
        return {"classification": self.classification, "depth": self.depth,
                "coords": self.coords, "edges": self.edges, "total": self.total}


def _mask_for(pred: Tensor, mask) -> np.ndarray:
    if mask is None:
        return np.ones(pred.shape, dtype=pred.data.dtype)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if m.shape != pred.shape:
        # a spatial mask (N,H,W) applied to a channelled map (N,C,H,W)
        if pred.data.ndim == m.ndim + 1 and pred.shape[:1] + pred.shape[2:] == m.shape:
            m = np.broadcast_to(m[:, None], pred.shape)
        else:
            raise ShapeError(f"mask {m.shape} does not match prediction {pred.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    return m.astype(pred.data.dtype)


def _masked_mean(per_cell: np.ndarray, dcell, pred: Tensor, inputs, m: np.ndarray) -> Tensor:
    count = m.sum()
    if count == 0:
        logger.warning("empty loss mask; returning 0")
        return make_result(np.zeros((), dtype=pred.data.dtype), inputs,
                           lambda g: (np.zeros_like(pred.data),) + (None,) * (len(inputs) - 1))
    value = np.asarray((per_cell * m).sum() / count, dtype=pred.data.dtype)

    def backward(g):
        return (g * m * dcell() / count,) + (None,) * (len(inputs) - 1)

    return make_result(value, inputs, backward)


def mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error, averaged over cells where ``mask == 1``."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: pred {pred.shape} vs target {target.shape}")
    m = _mask_for(pred, mask)
    diff = pred.data - target.data
    return _masked_mean(diff * diff, lambda: 2 * diff, pred, (pred, target), m)


def bce(pred: Tensor, target, mask=None) -> Tensor:
    """Binary cross-entropy of probabilities ``pred`` against targets in [0, 1]."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"bce: pred {pred.shape} vs target {target.shape}")
    t = target.data
    if t.size and (t.min() < 0 or t.max() > 1):
        raise ValueError("bce targets must lie in [0, 1]")
    m = _mask_for(pred, mask)
    p = np.clip(pred.data, PROB_FLOOR, 1 - PROB_FLOOR)
    inside = (pred.data > PROB_FLOOR) & (pred.data < 1 - PROB_FLOOR)
    per_cell = -(t * np.log(p) + (1 - t) * np.log1p(-p))
    return _masked_mean(per_cell, lambda: inside * (p - t) / (p * (1 - p)), pred, (pred, target), m)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` (N, K) against integer ``labels`` (N,)."""
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64)
    if logits.data.ndim != 2 or labels.shape != logits.shape[:1]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    rows = np.arange(n)
    value = np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (g * d / n,)

    return make_result(value, (logits,), backward)


def losses(kind: str, pred: Tensor, target, mask=None) -> Tensor:
    if kind == "mse":
        return mse(pred, target, mask)
    if kind == "bce":
        return bce(pred, target, mask)
    if kind == "softmax_cross_entropy":
        if mask is not None:
            raise ValueError("softmax_cross_entropy takes no mask")
        return softmax_cross_entropy(pred, target)
    raise ValueError(f"unknown loss kind {kind!r}")
