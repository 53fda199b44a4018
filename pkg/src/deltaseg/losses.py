"""Composite segmentation loss and deep-supervision aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass
class LossWeights:
    ce: float = 0.5
    dice: float = 0.3
    focal: float = 0.2
    head_lambdas: tuple[float, ...] = (1.0, 0.8, 0.6, 0.4)
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0
    class_weights: Union[str, Sequence[float]] = "auto"

    def __post_init__(self):
        self.head_lambdas = tuple(float(v) for v in self.head_lambdas)
        if not math.isclose(self.ce + self.dice + self.focal, 1.0, abs_tol=1e-9):
            raise ValueError(f"ce + dice + focal must equal 1, got {self.ce + self.dice + self.focal}")
        if not math.isclose(sum(self.head_lambdas), 2.8, abs_tol=1e-9):
            raise ValueError(f"head lambdas must sum to 2.8, got {sum(self.head_lambdas)}")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be non-negative")


def _check_target(logits: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} does not match logits {(n, h, w)}")
    bad = (target < 0) | (target >= c)
    if bad.any():
        coord = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ValueError(f"label {int(target[coord])} at (n, i, j)={coord} outside [0, {c})")
    return target.astype(np.int64)


def _one_hot(target: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    return (target[:, None, :, :] == np.arange(num_classes).reshape(1, -1, 1, 1)).astype(dtype)


def ce_loss(logits: Tensor, target: np.ndarray, weights: Optional[Sequence[float]] = None) -> Tensor:
    """Class-weighted cross-entropy normalized by the sum of applied weights."""
    target = _check_target(logits, target)
    c = logits.shape[1]
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    w_map = w[target].astype(logits.dtype)
    picked = ops.sum(ops.log_softmax(logits, axis=1) * _one_hot(target, c, logits.dtype), axis=1)
    return -ops.sum(picked * w_map) / float(w_map.sum())


def dice_loss(logits: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - mean over classes of soft Dice, sums taken over every pixel of the batch."""
    target = _check_target(logits, target)
    c = logits.shape[1]
    probs = ops.softmax(logits, axis=1)
    onehot = _one_hot(target, c, logits.dtype)
    inter = ops.sum(probs * onehot, axis=(0, 2, 3))
    denom = ops.sum(probs, axis=(0, 2, 3)) + onehot.sum(axis=(0, 2, 3))
    per_class = (2.0 * inter + smooth) / (denom + smooth)
    return 1.0 - ops.mean(per_class)


def focal_loss(logits: Tensor, target: np.ndarray, gamma: float = 2.0) -> Tensor:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    target = _check_target(logits, target)
    c = logits.shape[1]
    logp_y = ops.sum(ops.log_softmax(logits, axis=1) * _one_hot(target, c, logits.dtype), axis=1)
    if gamma == 0:
        return -ops.mean(logp_y)
    modulator = (1.0 - ops.exp(logp_y)) ** gamma
    return -ops.mean(modulator * logp_y)


def composite_loss(
    logits: Tensor,
    target: np.ndarray,
    w: Optional[LossWeights] = None,
    class_weights: Optional[Sequence[float]] = None,
) -> tuple[Tensor, dict[str, float]]:
    """ce/dice/focal linear combination; the breakdown holds the raw terms and the total."""
    w = w or LossWeights()
    ce = ce_loss(logits, target, class_weights)
    dc = dice_loss(logits, target, w.dice_smooth)
    fl = focal_loss(logits, target, w.focal_gamma)
    total = w.ce * ce + w.dice * dc + w.focal * fl
    terms = {"ce": ce.item(), "dice": dc.item(), "focal": fl.item(), "total": total.item()}
    return total, terms


@dataclass
class LossReport:
    total: float
    heads: list[dict[str, float]] = field(default_factory=list)

    def primary(self) -> dict[str, float]:
        return self.heads[0]


def deep_supervised_loss(
    heads,
    target: np.ndarray,
    w: Optional[LossWeights] = None,
    class_weights: Optional[Sequence[float]] = None,
) -> tuple[Tensor, LossReport]:
    """Lambda-weighted mean of per-head composite losses.

    ``heads`` is a `ModelOutputs` or a sequence of logits ordered dec1 (full
    resolution) to dec4; lower-resolution logits are bilinearly upsampled to
    the target size before scoring.
    """
    w = w or LossWeights()
    heads = list(heads.heads if hasattr(heads, "heads") else heads)
    if len(heads) != len(w.head_lambdas):
        raise ValueError(f"expected {len(w.head_lambdas)} heads in training mode, got {len(heads)}")
    h, wd = np.asarray(target).shape[1:]
    total = None
    report = LossReport(0.0)
    for lam, logits in zip(w.head_lambdas, heads):
        if logits.shape[2:] != (h, wd):
            logits = ops.resize_bilinear(logits, h, wd)
        loss, terms = composite_loss(logits, target, w, class_weights)
        report.heads.append(terms)
        total = lam * loss if total is None else total + lam * loss
    total = total / sum(w.head_lambdas)
    report.total = total.item()
    return total, report
