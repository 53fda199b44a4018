"""Confusion-matrix metrics: per-class IoU and Dice, defect-only means."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class ConfusionAccumulator:
    """C x C pixel tallies, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, target: np.ndarray) -> None:
        pred, target = np.asarray(pred), np.asarray(target)
        if pred.shape != target.shape:
            raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
        c = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= c or target.min() < 0 or target.max() >= c):
            raise ValueError(f"labels must lie in [0, {c})")
        idx = target.reshape(-1).astype(np.int64) * c + pred.reshape(-1).astype(np.int64)
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge accumulators with different class counts")
        out = ConfusionAccumulator(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def score(self) -> "Scores":
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        union = tp + fp + fn
        present = union > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(present, tp / union, np.nan)
            dice = np.where(present, 2 * tp / (2 * tp + fp + fn), np.nan)
        defect = present.copy()
        defect[0] = False
        defect_miou = float(iou[defect].mean()) if defect.any() else math.nan
        mean_f1 = float(dice[defect].mean()) if defect.any() else math.nan
        return Scores(iou, dice, defect_miou, mean_f1, self.counts.sum(axis=1))


@dataclass
class Scores:
    iou: np.ndarray
    dice: np.ndarray
    defect_miou: float
    mean_f1: float
    pixel_counts: np.ndarray

    def rows(self, class_names: Optional[Sequence[str]] = None) -> list[dict]:
        names = list(class_names) if class_names else [f"class{i}" for i in range(len(self.iou))]
        rows = [
            {"name": names[i], "iou": float(self.iou[i]), "dice": float(self.dice[i]),
             "pixels": int(self.pixel_counts[i])}
            for i in range(len(self.iou))
        ]
        rows.append({"name": "defect_mean", "iou": self.defect_miou, "dice": self.mean_f1,
                     "pixels": int(self.pixel_counts[1:].sum())})
        return rows

    def to_csv(self, class_names: Optional[Sequence[str]] = None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["name", "iou", "dice", "pixels"], lineterminator="\n")
        writer.writeheader()
        for row in self.rows(class_names):
            writer.writerow({**row, "iou": _fmt(row["iou"]), "dice": _fmt(row["dice"])})
        return buf.getvalue()

    def pretty(self, class_names: Optional[Sequence[str]] = None) -> str:
        rows = self.rows(class_names)
        width = max(12, max(len(r["name"]) for r in rows))
        lines = [f"{'class':<{width}} {'IoU':>8} {'Dice':>8} {'pixels':>10}"]
        for r in rows:
            lines.append(f"{r['name']:<{width}} {_fmt(r['iou']):>8} {_fmt(r['dice']):>8} {r['pixels']:>10}")
        return "\n".join(lines)


def _fmt(v: float) -> str:
    return "undefined" if v is None or math.isnan(v) else f"{v:.4f}"


def accumulate_and_score(acc: ConfusionAccumulator, pred: np.ndarray, target: np.ndarray) -> Scores:
    acc.update(pred, target)
    return acc.score()


def auto_class_weights(counts: Sequence[int], lo: float = 0.1, hi: float = 50.0) -> np.ndarray:
    """Inverse-frequency weights total / (C * count_c), clamped; empty classes get ``hi``."""
    counts = np.asarray(counts, dtype=np.float64)
    total, c = counts.sum(), len(counts)
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, total / (c * counts), hi)
    return np.clip(w, lo, hi)
