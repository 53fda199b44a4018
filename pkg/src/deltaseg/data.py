"""Dataset I/O, paired image/mask augmentation and a synthetic defect generator.

On-disk layout::

    <root>/classes.txt                   one class name per line, line 0 = background
    <root>/palette.json                  index -> [r, g, b] display colours
    <root>/<split>/images/<id>.png       RGB image
    <root>/<split>/masks/<id>.png        single-channel 8-bit index mask
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .ops import bilinear_matrix
from .tensor import Tensor

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: np.ndarray  # (H, W) uint8 / int
    id: str = ""

    def __post_init__(self):
        if self.image.shape[1:] != self.label.shape:
            raise ValueError(f"sample {self.id!r}: image {self.image.shape[1:]} and label {self.label.shape} differ")


@dataclass
class DatasetManifest:
    root: str
    class_names: list[str]
    class_counts: list[int]
    split: str
    input_size: tuple[int, int]
    ids: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


# -- resizing --------------------------------------------------------------------


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear (half-pixel centre) resize of a (C, H, W) array."""
    h, w = image.shape[1:]
    if (h, w) == tuple(size):
        return image.astype(np.float32, copy=True)
    mh = bilinear_matrix(h, size[0], np.float64)
    mw = bilinear_matrix(w, size[1], np.float64)
    return (mh @ image.astype(np.float64) @ mw.T).astype(np.float32)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize; never introduces labels absent from the input."""
    h, w = mask.shape
    rows = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(np.int64), w - 1)
    return mask[rows[:, None], cols[None, :]]


# -- disk I/O ----------------------------------------------------------------------


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise ValueError(f"mask {path} must be a single-channel index image, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def write_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def default_palette(num_classes: int) -> list[list[int]]:
    base = [
        [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
        [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
    ]
    rng = np.random.default_rng(1234)
    while len(base) < num_classes:
        base.append([int(v) for v in rng.integers(0, 256, 3)])
    return base[:num_classes]


def read_class_names(root: Path) -> list[str]:
    path = Path(root) / "classes.txt"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def read_palette(root: Path, num_classes: int) -> list[list[int]]:
    path = Path(root) / "palette.json"
    if path.exists():
        return [list(map(int, c)) for c in json.loads(path.read_text())][:num_classes]
    return default_palette(num_classes)


def write_dataset(root, split: str, samples: Sequence[Sample], class_names: Sequence[str]) -> None:
    root = Path(root)
    img_dir, mask_dir = root / split / "images", root / split / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("\n".join(class_names) + "\n")
    (root / "palette.json").write_text(json.dumps(default_palette(len(class_names))))
    for s in samples:
        write_image(img_dir / f"{s.id}.png", s.image)
        write_mask(mask_dir / f"{s.id}.png", s.label)


def load_dataset(root, split: str, num_classes: int, input_size: tuple[int, int]) -> tuple[DatasetManifest, list[Sample]]:
    root = Path(root)
    img_dir, mask_dir = root / split / "images", root / split / "masks"
    images = sorted(p for p in img_dir.glob("*") if p.suffix.lower() in IMAGE_EXTS) if img_dir.is_dir() else []
    if not images:
        raise FileNotFoundError(f"no samples found in {img_dir}")
    missing = [p.stem for p in images if not (mask_dir / f"{p.stem}.png").exists()]
    if missing:
        raise FileNotFoundError(f"images without masks in {mask_dir}: {', '.join(missing)}")
    names = read_class_names(root) if (root / "classes.txt").exists() else [f"class{i}" for i in range(num_classes)]
    if len(names) != num_classes:
        raise ValueError(f"classes.txt lists {len(names)} classes but num_classes={num_classes}")
    size = tuple(int(v) for v in input_size)
    samples, counts = [], np.zeros(num_classes, dtype=np.int64)
    for p in images:
        mask = read_mask(mask_dir / f"{p.stem}.png")
        if mask.max() >= num_classes:
            raise ValueError(f"mask {p.stem} has label {int(mask.max())} >= num_classes={num_classes}")
        mask = resize_mask(mask, size).astype(np.uint8)
        image = resize_image(read_image(p), size)
        counts += np.bincount(mask.reshape(-1), minlength=num_classes)
        samples.append(Sample(np.clip(image, 0.0, 1.0), mask, p.stem))
    manifest = DatasetManifest(str(root), names, counts.tolist(), split, size, [s.id for s in samples])
    return manifest, samples


def class_counts(samples: Sequence[Sample], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(np.asarray(s.label).reshape(-1), minlength=num_classes)
    return counts


# -- augmentation --------------------------------------------------------------------


@dataclass
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot90: float = 0.5
    p_affine: float = 0.5
    max_angle: float = 15.0
    p_color: float = 0.5
    brightness: tuple[float, float] = (0.8, 1.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.0, 1.5)
    p_noise: float = 0.5
    noise_sigma: tuple[float, float] = (0.0, 0.03)
    p_crop: float = 0.5
    crop_scale: tuple[float, float] = (0.7, 1.0)


@dataclass
class AugmentPlan:
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0
    angle: Optional[float] = None
    brightness: Optional[float] = None
    contrast: Optional[float] = None
    blur_sigma: Optional[float] = None
    noise_sigma: Optional[float] = None
    noise_seed: int = 0
    crop: Optional[tuple[float, float, float]] = None  # scale, top fraction, left fraction

    @property
    def is_identity(self) -> bool:
        return not (self.hflip or self.vflip or self.rot90 or self.angle is not None
                    or self.brightness is not None or self.blur_sigma is not None
                    or self.noise_sigma is not None or self.crop is not None)


def draw_plan(seed: int, cfg: Optional[AugmentConfig] = None) -> AugmentPlan:
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    u = rng.random(8)
    plan = AugmentPlan(noise_seed=int(rng.integers(2**31)))
    plan.hflip = bool(u[0] < cfg.p_hflip)
    plan.vflip = bool(u[1] < cfg.p_vflip)
    if u[2] < cfg.p_rot90:
        plan.rot90 = int(rng.integers(1, 4))
    if u[3] < cfg.p_affine:
        plan.angle = float(rng.uniform(-cfg.max_angle, cfg.max_angle))
    if u[4] < cfg.p_color:
        plan.brightness = float(rng.uniform(*cfg.brightness))
        plan.contrast = float(rng.uniform(*cfg.contrast))
    if u[5] < cfg.p_blur:
        plan.blur_sigma = float(rng.uniform(*cfg.blur_sigma))
    if u[6] < cfg.p_noise:
        plan.noise_sigma = float(rng.uniform(*cfg.noise_sigma))
    if u[7] < cfg.p_crop:
        plan.crop = (float(rng.uniform(*cfg.crop_scale)), float(rng.random()), float(rng.random()))
    return plan


def geometric(image: np.ndarray, mask: np.ndarray, plan: AugmentPlan) -> tuple[np.ndarray, np.ndarray]:
    """Apply the plan's spatial ops to a (C, H, W) image and (H, W) mask identically."""
    h, w = mask.shape
    if plan.hflip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if plan.vflip:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    if plan.rot90:
        image, mask = np.rot90(image, plan.rot90, axes=(1, 2)), np.rot90(mask, plan.rot90)
        if image.shape[1:] != (h, w):
            image, mask = resize_image(np.ascontiguousarray(image), (h, w)), resize_mask(mask, (h, w))
    if plan.angle is not None:
        image = ndimage.rotate(image, plan.angle, axes=(2, 1), reshape=False, order=1, mode="reflect")
        mask = ndimage.rotate(mask, plan.angle, axes=(1, 0), reshape=False, order=0, mode="reflect")
    if plan.crop is not None:
        scale, top_f, left_f = plan.crop
        ch, cw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
        top, left = int(top_f * (h - ch + 1)), int(left_f * (w - cw + 1))
        top, left = min(top, h - ch), min(left, w - cw)
        image = resize_image(np.ascontiguousarray(image[:, top:top + ch, left:left + cw]), (h, w))
        mask = resize_mask(mask[top:top + ch, left:left + cw], (h, w))
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def photometric(image: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    if plan.brightness is not None:
        mean = image.mean()
        image = ((image - mean) * plan.contrast + mean) * plan.brightness
    if plan.blur_sigma is not None and plan.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, sigma=(0, plan.blur_sigma, plan.blur_sigma))
    if plan.noise_sigma is not None:
        image = image + np.random.default_rng(plan.noise_seed).normal(0.0, plan.noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def apply_plan(s: Sample, plan: AugmentPlan) -> Sample:
    if plan.is_identity:
        return Sample(s.image.copy(), s.label.copy(), s.id)
    image, mask = geometric(s.image, s.label, plan)
    return Sample(photometric(image, plan), mask, s.id)


def augment(s: Sample, rng_seed: int, cfg: Optional[AugmentConfig] = None) -> Sample:
    """Seeded augmentation; geometry applies to image and mask, photometrics to the image only."""
    return apply_plan(s, draw_plan(rng_seed, cfg))


_augment_sample = augment


# -- synthetic data --------------------------------------------------------------------

_SHAPES = ("polyline", "blob", "speckle")


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.45, 0.6)
    grain = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 2.0)
    grain = grain / (np.abs(grain).max() + 1e-8)
    img = base + 0.08 * grain + rng.normal(0, 0.015, (size, size))
    tint = rng.uniform(-0.03, 0.03, 3)
    return np.stack([img + t for t in tint])


def _draw_polyline(rng, size: int) -> np.ndarray:
    im = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(im)
    n_seg = int(rng.integers(3, 6))
    pts = [tuple(rng.uniform(0.15 * size, 0.85 * size, 2))]
    for _ in range(n_seg):
        ang = rng.uniform(0, 2 * math.pi)
        step = rng.uniform(0.12, 0.25) * size
        x = float(np.clip(pts[-1][0] + step * math.cos(ang), 0, size - 1))
        y = float(np.clip(pts[-1][1] + step * math.sin(ang), 0, size - 1))
        pts.append((x, y))
    draw.line(pts, fill=1, width=int(rng.integers(1, 3)))
    return np.asarray(im, dtype=bool)


def _draw_blob(rng, size: int) -> np.ndarray:
    im = Image.new("L", (size, size), 0)
    cx, cy = rng.uniform(0.25 * size, 0.75 * size, 2)
    r = rng.uniform(0.08, 0.16) * size
    angles = np.sort(rng.uniform(0, 2 * math.pi, 9))
    radii = r * rng.uniform(0.7, 1.3, 9)
    poly = [(float(cx + q * math.cos(a)), float(cy + q * math.sin(a))) for a, q in zip(angles, radii)]
    ImageDraw.Draw(im).polygon(poly, fill=1)
    return np.asarray(im, dtype=bool)


def _draw_speckle(rng, size: int) -> np.ndarray:
    im = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(im)
    cx, cy = rng.uniform(0.25 * size, 0.75 * size, 2)
    spread = 0.15 * size
    for _ in range(int(rng.integers(15, 30))):
        x, y = cx + rng.normal(0, spread), cy + rng.normal(0, spread)
        rad = rng.uniform(0.6, 1.6)
        draw.ellipse([x - rad, y - rad, x + rad, y + rad], fill=1)
    return np.asarray(im, dtype=bool)


_DRAW = {"polyline": _draw_polyline, "blob": _draw_blob, "speckle": _draw_speckle}


def class_shape(c: int) -> str:
    """Shape generator for defect class c >= 1; classes beyond the third reuse shapes."""
    return _SHAPES[(c - 1) % len(_SHAPES)]


def class_colour(c: int, num_classes: int) -> np.ndarray:
    """Distinct intensity per class so reused shapes stay separable."""
    if c == 0:
        return np.zeros(3)
    hue = (c - 1) / max(num_classes - 1, 1)
    rgb = np.array([math.cos(2 * math.pi * (hue + k / 3)) for k in range(3)])
    return 0.5 + 0.45 * rgb


MIN_COVERAGE = 0.005
MAX_POLYLINE_COVERAGE = 0.05


def _synth_one(rng: np.random.Generator, num_classes: int, size: int, sid: str) -> Sample:
    for _ in range(100):
        assigned = [c for c in range(1, num_classes) if rng.random() < 0.8]
        if not assigned:
            assigned = [int(rng.integers(1, num_classes))]
        label = np.zeros((size, size), dtype=np.uint8)
        for c in assigned:
            label[_DRAW[class_shape(c)](rng, size)] = c
        cover = np.bincount(label.reshape(-1), minlength=num_classes) / label.size
        ok = all(cover[c] >= MIN_COVERAGE for c in assigned)
        ok &= all(cover[c] <= MAX_POLYLINE_COVERAGE for c in assigned if class_shape(c) == "polyline")
        if ok:
            break
    else:
        raise RuntimeError("could not place defects with the required coverage")
    image = _texture(rng, size)
    for c in assigned:
        region = label == c
        colour = class_colour(c, num_classes)
        shade = rng.normal(0, 0.03, region.sum())
        for k in range(3):
            image[k][region] = colour[k] + shade
    return Sample(np.clip(image, 0, 1).astype(np.float32), label, sid)


def make_synthetic_dataset(n: int, num_classes: int, size: int, seed: int) -> list[Sample]:
    """Textured background plus crack-, spall- and corrosion-like defects, deterministic per seed."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if size < 32:
        raise ValueError("size must be >= 32")
    rng = np.random.default_rng(seed)
    return [_synth_one(rng, num_classes, size, f"synth_{i:04d}") for i in range(n)]


def synthetic_class_names(num_classes: int) -> list[str]:
    names = ["background"]
    for c in range(1, num_classes):
        names.append(f"{class_shape(c)}_{c}")
    return names


# -- batching ----------------------------------------------------------------------------


def sample_seed(shuffle_seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([shuffle_seed, epoch, index]).generate_state(1)[0])


def epoch_order(n: int, shuffle_seed: Optional[int], epoch: int = 0) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batch_iter(
    samples: Sequence[Sample],
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    augment: bool = False,
    epoch: int = 0,
    aug_cfg: Optional[AugmentConfig] = None,
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield (images N x 3 x H x W, labels N x H x W); the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(samples), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        batch = []
        for idx in order[start:start + batch_size]:
            s = samples[int(idx)]
            if augment:
                s = _augment_sample(s, sample_seed(shuffle_seed or 0, epoch, int(idx)), aug_cfg)
            batch.append(s)
        images = np.stack([s.image for s in batch]).astype(np.float32)
        labels = np.stack([np.asarray(s.label, dtype=np.int64) for s in batch])
        yield Tensor(images), labels
