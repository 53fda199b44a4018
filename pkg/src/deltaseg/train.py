"""Training, evaluation and prediction loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    Sample, batch_iter, class_counts, default_palette, load_dataset, read_class_names, read_image,
    read_palette, resize_image, write_mask,
)
from .losses import LossWeights, composite_loss, deep_supervised_loss
from .metrics import ConfusionAccumulator, Scores, auto_class_weights
from .network import DeltaSeg, ModelConfig, build_model
from .optim import OptimState, adamw_step, cosine_lr
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

STEP_FIELDS = ("step", "lr", "total_loss", "ce", "dice", "focal")
EPOCH_FIELDS = ("epoch", "val_defect_miou", "val_mean_f1", "val_loss")


@dataclass
class RunConfig:
    epochs: int = 100
    batch_size: int = 16
    lr0: float = 1e-3
    eta_min: float = 0.0
    weight_decay: float = 1e-5
    seed: int = 0
    data_root: Optional[str] = None
    train_split: str = "train"
    val_split: str = "val"
    out_dir: str = "runs/deltaseg"
    eval_interval: int = 1
    augment: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr0 > self.eta_min >= 0:
            raise ValueError(f"need lr0 > eta_min >= 0, got lr0={self.lr0}, eta_min={self.eta_min}")


@dataclass
class TrainResult:
    model: DeltaSeg
    step_log: list[dict] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)
    last_checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None
    class_weights: Optional[np.ndarray] = None


def _format_row(row: dict, fields: Sequence[str]) -> str:
    out = []
    for f in fields:
        v = row[f]
        out.append(str(v) if isinstance(v, (int, np.integer)) else repr(float(v)))
    return ",".join(out)


def _resolve_class_weights(spec, samples: Sequence[Sample], num_classes: int) -> Optional[np.ndarray]:
    if spec is None:
        return None
    if isinstance(spec, str):
        if spec != "auto":
            raise ValueError(f"class_weights must be 'auto' or a list, got {spec!r}")
        return auto_class_weights(class_counts(samples, num_classes))
    w = np.asarray(spec, dtype=np.float64)
    if w.shape != (num_classes,):
        raise ValueError(f"class_weights needs {num_classes} entries, got {w.shape}")
    return w


def predict_labels(model: DeltaSeg, images: Tensor) -> np.ndarray:
    model.eval()
    with no_grad():
        logits = model(images).primary_logits
    return logits.data.argmax(axis=1)


def evaluate_samples(
    model: DeltaSeg,
    samples: Sequence[Sample],
    batch_size: int = 8,
    loss_weights: Optional[LossWeights] = None,
    class_weights: Optional[np.ndarray] = None,
) -> tuple[Scores, float]:
    """Eval-mode argmax predictions accumulated over ``samples``; also returns the mean primary loss."""
    num_classes = model.cfg.num_classes
    acc = ConfusionAccumulator(num_classes)
    model.eval()
    loss_sum, n = 0.0, 0
    with no_grad():
        for images, labels in batch_iter(samples, batch_size):
            if labels.max() >= num_classes:
                raise ValueError(f"dataset label {int(labels.max())} exceeds model class count {num_classes}")
            logits = model(images).primary_logits
            acc.update(logits.data.argmax(axis=1), labels)
            loss, _ = composite_loss(logits, labels, loss_weights, class_weights)
            loss_sum += loss.item() * len(labels)
            n += len(labels)
    return acc.score(), loss_sum / max(n, 1)


def train(
    cfg: RunConfig,
    train_samples: Optional[Sequence[Sample]] = None,
    val_samples: Optional[Sequence[Sample]] = None,
    class_names: Optional[Sequence[str]] = None,
    max_steps: Optional[int] = None,
    write_files: bool = True,
) -> TrainResult:
    """Deep-supervised AdamW training with a per-step cosine schedule.

    Samples come from ``cfg.data_root`` unless passed in. ``max_steps`` stops
    early while keeping the schedule of the full run; it also sizes the
    schedule when it is the binding limit.
    """
    cfg.validate()
    mcfg = replace(cfg.model, seed=cfg.seed)
    if train_samples is None:
        if not cfg.data_root:
            raise ValueError("no training data: set data_root or pass samples")
        manifest, train_samples = load_dataset(cfg.data_root, cfg.train_split, mcfg.num_classes, mcfg.input_size)
        class_names = manifest.class_names
        if val_samples is None and (Path(cfg.data_root) / cfg.val_split / "images").is_dir():
            _, val_samples = load_dataset(cfg.data_root, cfg.val_split, mcfg.num_classes, mcfg.input_size)
    if not train_samples:
        raise ValueError("no training samples")

    model = build_model(mcfg)
    model.train()
    params = list(model.named_parameters())
    class_weights = _resolve_class_weights(cfg.loss.class_weights, train_samples, mcfg.num_classes)
    if class_weights is not None:
        log.info("class weights: %s", ", ".join(f"{w:.4f}" for w in class_weights))

    batches_per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    state = OptimState(lr=cfg.lr0, weight_decay=cfg.weight_decay)
    out_dir = Path(cfg.out_dir)
    result = TrainResult(model, class_weights=class_weights)
    palette = read_palette(cfg.data_root, mcfg.num_classes) if cfg.data_root else default_palette(mcfg.num_classes)
    meta = {
        "class_names": list(class_names or []),
        "class_weights": None if class_weights is None else class_weights.tolist(),
        "palette": palette,
        "seed": cfg.seed,
    }

    step_fh = epoch_fh = None
    if write_files:
        out_dir.mkdir(parents=True, exist_ok=True)
        step_fh = open(out_dir / "train_log.csv", "w")
        step_fh.write(",".join(STEP_FIELDS) + "\n")
        epoch_fh = open(out_dir / "val_log.csv", "w")
        epoch_fh.write(",".join(EPOCH_FIELDS) + "\n")

    best_key = None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            for images, labels in batch_iter(train_samples, cfg.batch_size, shuffle_seed=cfg.seed,
                                             augment=cfg.augment, epoch=epoch):
                if step >= total_steps:
                    break
                state.lr = cosine_lr(step, total_steps, cfg.lr0, cfg.eta_min)
                outputs = model(images)
                loss, report = deep_supervised_loss(outputs, labels, cfg.loss, class_weights)
                if not math.isfinite(report.total):
                    if write_files:
                        save_checkpoint(out_dir / "last_finite.npz", model, {**meta, "step": step})
                    raise FloatingPointError(f"non-finite loss at step {step}")
                model.zero_grad()
                loss.backward()
                adamw_step(params, state)
                primary = report.primary()
                row = {"step": step, "lr": state.lr, "total_loss": report.total,
                       "ce": primary["ce"], "dice": primary["dice"], "focal": primary["focal"]}
                result.step_log.append(row)
                if step_fh:
                    step_fh.write(_format_row(row, STEP_FIELDS) + "\n")
                log.debug("step %d lr %.3e loss %.5f", step, state.lr, report.total)
                step += 1

            if val_samples and ((epoch + 1) % cfg.eval_interval == 0 or step >= total_steps):
                scores, val_loss = evaluate_samples(model, val_samples, cfg.batch_size, cfg.loss, class_weights)
                row = {"epoch": epoch, "val_defect_miou": scores.defect_miou,
                       "val_mean_f1": scores.mean_f1, "val_loss": val_loss}
                result.epoch_log.append(row)
                if epoch_fh:
                    epoch_fh.write(_format_row(row, EPOCH_FIELDS) + "\n")
                log.info("epoch %d val defect mIoU %.4f loss %.4f", epoch, scores.defect_miou, val_loss)
                miou = -math.inf if math.isnan(scores.defect_miou) else scores.defect_miou
                key = (miou, -val_loss)
                if best_key is None or key > best_key:
                    best_key = key
                    if write_files:
                        result.best_checkpoint = save_checkpoint(
                            out_dir / "best.npz", model, {**meta, "epoch": epoch, "val_defect_miou": scores.defect_miou})
            if step >= total_steps:
                break
    finally:
        if step_fh:
            step_fh.close()
            epoch_fh.close()

    model.eval()
    if write_files:
        result.last_checkpoint = save_checkpoint(out_dir / "last.npz", model, {**meta, "step": step})
        if result.best_checkpoint is None:
            result.best_checkpoint = result.last_checkpoint
    return result


def evaluate(checkpoint: Union[str, Path], data_root, split: str = "test", batch_size: int = 8) -> tuple[Scores, list[str]]:
    model, header = load_checkpoint(checkpoint)
    names = read_class_names(data_root)
    if len(names) != model.cfg.num_classes:
        raise ValueError(
            f"checkpoint has {model.cfg.num_classes} classes but dataset {data_root} lists {len(names)}"
        )
    _, samples = load_dataset(data_root, split, model.cfg.num_classes, model.cfg.input_size)
    scores, _ = evaluate_samples(model, samples, batch_size)
    return scores, names


def colorize(mask: np.ndarray, palette: Sequence[Sequence[int]]) -> np.ndarray:
    pal = np.asarray(palette, dtype=np.uint8)
    return pal[mask]


def predict(checkpoint, image_paths: Sequence, out_dir, palette: Optional[Sequence[Sequence[int]]] = None) -> list[str]:
    """Write ``<stem>_mask.png`` (index) and ``<stem>_color.png`` per readable image.

    Returns the paths that could not be read.
    """
    model, header = load_checkpoint(checkpoint)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    num_classes = model.cfg.num_classes
    if palette is None:
        palette = header.get("meta", {}).get("palette") or default_palette(num_classes)
    failed = []
    for path in image_paths:
        path = Path(path)
        try:
            image = read_image(path)
        except Exception as exc:  # unreadable or not an image
            log.warning("skipping %s: %s", path, exc)
            failed.append(str(path))
            continue
        h, w = image.shape[1:]
        x = Tensor(resize_image(image, model.cfg.input_size)[None])
        model.eval()
        with no_grad():
            logits = model(x).primary_logits
            logits = ops.resize_bilinear(logits, h, w)
        mask = logits.data[0].argmax(axis=0).astype(np.uint8)
        write_mask(out_dir / f"{path.stem}_mask.png", mask)
        Image.fromarray(colorize(mask, palette), mode="RGB").save(out_dir / f"{path.stem}_color.png")
    return failed
