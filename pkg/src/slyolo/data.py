"""VisDrone-format ingestion, letterbox preprocessing, light augmentation, and a
deterministic synthetic small-object dataset for desk-scale runs.

Dataset layout (both real and synthetic): ``images/*.jpg`` plus
``annotations/*.txt`` with one object per line,
``left,top,width,height,score,category,truncation,occlusion``.  Category 0
(ignored regions) and 11 (others) are dropped; categories 1-10 map to class
ids 0-9.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .errors import AnnotationParseError, ConfigError

log = logging.getLogger(__name__)

PAD_VALUE = 114
NUM_CLASSES = 10
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")

# 10 visually distinct BGR colors for the synthetic classes
SYNTH_PALETTE = (
    (40, 40, 230),    # red
    (60, 200, 60),    # green
    (230, 80, 40),    # blue
    (50, 220, 230),   # yellow
    (230, 60, 220),   # magenta
    (230, 220, 80),   # cyan
    (30, 140, 245),   # orange
    (160, 60, 130),   # purple
    (90, 180, 220),   # tan
    (245, 245, 245),  # white
)


@dataclass(frozen=True)
class AnnotationRecord:
    """One retained VisDrone annotation row."""

    bbox_left: float
    bbox_top: float
    bbox_width: float
    bbox_height: float
    score: int
    category: int
    truncation: int
    occlusion: int

    @property
    def class_id(self) -> int:
        return self.category - 1

    def to_line(self) -> str:
        def num(v):
            return str(int(v)) if float(v).is_integer() else str(v)

        return ",".join(
            [num(self.bbox_left), num(self.bbox_top), num(self.bbox_width), num(self.bbox_height),
             str(self.score), str(self.category), str(self.truncation), str(self.occlusion)]
        )


def parse_visdrone_line(line: str, line_number: int | None = None):
    """Parse one annotation line; returns a record, or None for rejected rows.

    Rejected: ignored regions (category 0), the "others" class (category 11),
    and degenerate boxes.  Malformed lines raise AnnotationParseError.
    """
    parts = [p for p in line.strip().split(",") if p != ""]
    if len(parts) < 8:
        raise AnnotationParseError(f"expected >= 8 comma-separated fields, got {len(parts)}", line_number)
    try:
        left, top, w, h = (float(p) for p in parts[:4])
        score, category, truncation, occlusion = (int(float(p)) for p in parts[4:8])
    except ValueError as e:
        raise AnnotationParseError(f"non-numeric field ({e})", line_number) from None
    if w <= 0 or h <= 0:
        return None
    if category < 1 or category > NUM_CLASSES:
        return None
    return AnnotationRecord(left, top, w, h, score, category, truncation, occlusion)


def load_annotations(path) -> list:
    """Parse an annotation file, keeping retained records only."""
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = parse_visdrone_line(line, lineno)
            if rec is not None:
                records.append(rec)
    return records


@dataclass
class Sample:
    """One preprocessed training/eval sample on the letterboxed canvas."""

    image: torch.Tensor                  # (3, H, W) float32 in [0, 1]
    boxes: np.ndarray                    # (n, 5): class_id, cx, cy, w, h, normalized
    meta: dict = field(default_factory=dict)


def letterbox(image: np.ndarray, boxes=(), target: int = 640) -> Sample:
    """Aspect-preserving resize to a ``target`` square with symmetric gray padding.

    ``boxes`` are ``(class_id, left, top, width, height)`` in source pixels.
    """
    if target % 32:
        raise ConfigError(f"letterbox target {target} must be divisible by 32")
    if image is None or image.size == 0:
        raise ValueError("empty image")
    h0, w0 = image.shape[:2]
    scale = min(target / h0, target / w0)
    new_w, new_h = max(1, round(w0 * scale)), max(1, round(h0 * scale))
    resized = cv2.resize(image, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    pad_x = (target - new_w) // 2
    pad_y = (target - new_h) // 2
    canvas = np.full((target, target, 3), PAD_VALUE, dtype=np.uint8)
    canvas[pad_y:pad_y + new_h, pad_x:pad_x + new_w] = resized

    out_boxes = []
    for cls, left, top, bw, bh in boxes:
        x1 = np.clip(left * scale + pad_x, pad_x, pad_x + new_w)
        y1 = np.clip(top * scale + pad_y, pad_y, pad_y + new_h)
        x2 = np.clip((left + bw) * scale + pad_x, pad_x, pad_x + new_w)
        y2 = np.clip((top + bh) * scale + pad_y, pad_y, pad_y + new_h)
        if x2 - x1 < 1e-6 or y2 - y1 < 1e-6:
            continue
        out_boxes.append(
            [cls, (x1 + x2) / 2 / target, (y1 + y2) / 2 / target, (x2 - x1) / target, (y2 - y1) / target]
        )
    tensor = torch.from_numpy(canvas[:, :, ::-1].copy()).permute(2, 0, 1).float() / 255.0
    return Sample(
        image=tensor,
        boxes=np.asarray(out_boxes, dtype=np.float64).reshape(-1, 5),
        meta={"orig_w": w0, "orig_h": h0, "scale": scale, "pad_x": pad_x, "pad_y": pad_y, "target": target},
    )


def unletterbox_boxes(boxes_xyxy: np.ndarray, meta: dict) -> np.ndarray:
    """Map canvas-pixel xyxy boxes back to original-image pixels."""
    boxes = np.asarray(boxes_xyxy, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, [0, 2]] = (boxes[:, [0, 2]] - meta["pad_x"]) / meta["scale"]
    boxes[:, [1, 3]] = (boxes[:, [1, 3]] - meta["pad_y"]) / meta["scale"]
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, meta["orig_w"])
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, meta["orig_h"])
    return boxes


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.integers(30, 120, size=(8, 8, 3), dtype=np.uint8)
    bg = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_LINEAR).astype(np.int16)
    noise = rng.integers(-12, 13, size=(size, size, 3), dtype=np.int16)
    return np.clip(bg + noise, 0, 255).astype(np.uint8)


def generate_synthetic_dataset(root, seed: int, n_images: int, image_size: int = 256,
                               classes: int = NUM_CLASSES):
    """Write a deterministic synthetic small-object dataset in VisDrone layout.

    Each image carries 5-30 geometric targets of 4-24 px on a textured
    background; class identity is a fixed color (and circle/square shape).
    The same seed always produces byte-identical files.
    """
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    if classes < 1 or classes > NUM_CLASSES:
        raise ConfigError(f"classes must lie in 1..{NUM_CLASSES}, got {classes}")
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "annotations").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directories under {root}: {e}") from e

    rng = np.random.default_rng(seed)
    stems = []
    for i in range(n_images):
        img = _textured_background(rng, image_size)
        lines = []
        for _ in range(int(rng.integers(5, 31))):
            cls = int(rng.integers(0, classes))
            w = int(rng.integers(4, 25))
            h = int(rng.integers(4, 25))
            left = int(rng.integers(0, image_size - w))
            top = int(rng.integers(0, image_size - h))
            color = SYNTH_PALETTE[cls]
            if cls % 2 == 0:
                center = (left + w // 2, top + h // 2)
                cv2.ellipse(img, center, (max(1, w // 2), max(1, h // 2)), 0, 0, 360, color, -1)
            else:
                cv2.rectangle(img, (left, top), (left + w - 1, top + h - 1), color, -1)
            lines.append(AnnotationRecord(left, top, w, h, 1, cls + 1, 0, 0).to_line())
        stem = f"s{seed}_{i:05d}"
        ok = cv2.imwrite(str(root / "images" / f"{stem}.jpg"), img,
                         [cv2.IMWRITE_JPEG_QUALITY, 95])
        if not ok:
            raise OSError(f"cannot write image under {root}")
        (root / "annotations" / f"{stem}.txt").write_text("\n".join(lines) + "\n")
        stems.append(stem)
    return stems


def _augment(image: np.ndarray, boxes_px: list, rng: np.random.Generator):
    """Horizontal flip (p=0.5) and +/-10% scale jitter about the top-left corner."""
    h, w = image.shape[:2]
    out = image
    boxes = [list(b) for b in boxes_px]
    if rng.random() < 0.5:
        out = out[:, ::-1].copy()
        for b in boxes:
            b[1] = w - b[1] - b[3]  # left' = W - left - width
    f = float(rng.uniform(0.9, 1.1))
    if abs(f - 1.0) > 1e-6:
        new_w, new_h = max(1, round(w * f)), max(1, round(h * f))
        scaled = cv2.resize(out, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
        canvas = np.full_like(out, PAD_VALUE)
        cw, ch = min(w, new_w), min(h, new_h)
        canvas[:ch, :cw] = scaled[:ch, :cw]
        out = canvas
        kept = []
        for cls, left, top, bw, bh in boxes:
            x1, y1 = np.clip(left * f, 0, cw), np.clip(top * f, 0, ch)
            x2, y2 = np.clip((left + bw) * f, 0, cw), np.clip((top + bh) * f, 0, ch)
            if x2 - x1 >= 1 and y2 - y1 >= 1:
                kept.append([cls, x1, y1, x2 - x1, y2 - y1])
        boxes = kept
    return out, boxes


class VisDroneDataset:
    """Indexes an ``images/`` + ``annotations/`` directory pair.

    ``root/split`` is used when present, otherwise ``root`` itself must hold
    the two directories (the synthetic generator's flat layout).
    """

    def __init__(self, root, split: str = "train", image_size: int = 640):
        if split not in ("train", "val", "test"):
            raise ConfigError(f"split must be train/val/test, got {split!r}")
        base = Path(root) / split
        if not (base / "images").is_dir():
            base = Path(root)
        if not (base / "images").is_dir():
            raise ConfigError(f"no images/ directory under {Path(root)} or {Path(root) / split}")
        self.base = base
        self.image_size = image_size
        self.items = []
        for img_path in sorted((base / "images").iterdir()):
            if img_path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            ann_path = base / "annotations" / f"{img_path.stem}.txt"
            if not ann_path.is_file():
                log.warning("skipping %s: no annotation file", img_path.name)
                continue
            self.items.append((img_path, ann_path))

    def __len__(self) -> int:
        return len(self.items)

    def load(self, index: int, augment_rng: np.random.Generator | None = None) -> Sample:
        img_path, ann_path = self.items[index]
        image = cv2.imread(str(img_path))
        if image is None:
            raise ValueError(f"cannot read image {img_path}")
        records = load_annotations(ann_path)
        boxes = [(r.class_id, r.bbox_left, r.bbox_top, r.bbox_width, r.bbox_height) for r in records]
        if augment_rng is not None:
            image, boxes = _augment(image, boxes, augment_rng)
        sample = letterbox(image, boxes, target=self.image_size)
        sample.meta["path"] = str(img_path)
        return sample


def dataset_iterator(root, split: str, batch_size: int, seed: int, augment: bool = False,
                     image_size: int = 640, epoch: int = 0):
    """Yield deterministic batches of Samples for one epoch.

    Order is a seed+epoch-determined permutation; augmentation draws come from
    a per-sample generator so the stream is reproducible regardless of consumer
    timing.
    """
    ds = root if isinstance(root, VisDroneDataset) else VisDroneDataset(root, split, image_size)
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        batch = []
        for index in order[start:start + batch_size]:
            rng = np.random.default_rng([seed, epoch, int(index)]) if augment else None
            batch.append(ds.load(int(index), augment_rng=rng))
        yield batch
