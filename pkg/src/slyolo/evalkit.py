"""Decoding, NMS, COCO-style mAP, and single-image latency benchmarking.

Box-overlap inner loops route through :mod:`slyolo.boxops`, which picks the
compiled kernel when available.  Default evaluation thresholds (conf 0.001,
NMS IoU 0.7, 300 detections per image) follow the baseline tooling the
architecture family is measured with.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import boxops
from .errors import ConfigError, NumericError
from .model import RawPrediction

CONF_THRESHOLD = 0.001
NMS_IOU_THRESHOLD = 0.7
MAX_DETECTIONS = 300
MAX_CANDIDATES = 30000
COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class DetectionBox:
    """One predicted box in pixel x1,y1,x2,y2 coordinates."""

    class_id: int
    score: float
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {(self.x1, self.y1, self.x2, self.y2)}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def xyxy(self):
        return (self.x1, self.y1, self.x2, self.y2)


def _as_xyxy(box) -> tuple:
    if isinstance(box, DetectionBox):
        return box.xyxy
    x1, y1, x2, y2 = (float(v) for v in box)
    return (x1, y1, x2, y2)


def iou(a, b) -> float:
    """Intersection-over-union of two boxes (DetectionBox or 4-sequences)."""
    ax1, ay1, ax2, ay2 = _as_xyxy(a)
    bx1, by1, bx2, by2 = _as_xyxy(b)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        raise ValueError("degenerate box in iou()")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def make_anchors(level_hw, strides, offset=0.5):
    """Cell-center anchor points (pixels) and per-anchor strides for the given levels."""
    points, stride_rows = [], []
    for (h, w), s in zip(level_hw, strides):
        xs = (torch.arange(w, dtype=torch.float32) + offset) * s
        ys = (torch.arange(h, dtype=torch.float32) + offset) * s
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        points.append(torch.stack((gx.reshape(-1), gy.reshape(-1)), dim=1))
        stride_rows.append(torch.full((h * w, 1), float(s)))
    return torch.cat(points), torch.cat(stride_rows)


def decode(raw: RawPrediction, conf_threshold: float = CONF_THRESHOLD):
    """Turn raw head outputs into candidate DetectionBoxes (per batch image).

    Box sides are the expectation of the softmax distribution over ``reg_max``
    bins, scaled by the level stride around the cell center; the class score is
    the sigmoid of the best class logit.
    """
    reg_max = raw.reg_max
    for t in raw.box:
        if t.shape[1] != 4 * reg_max:
            raise ConfigError(
                f"box tensor has {t.shape[1]} channels, expected 4*reg_max={4 * reg_max}"
            )
    batch = raw.box[0].shape[0]
    bins = torch.arange(reg_max, dtype=torch.float32)
    results = []
    with torch.no_grad():
        per_level = []
        for box_t, cls_t, stride in zip(raw.box, raw.cls, raw.strides):
            b, _, h, w = box_t.shape
            dist = box_t.view(b, 4, reg_max, h * w).softmax(dim=2)
            sides = (dist * bins.view(1, 1, reg_max, 1)).sum(dim=2) * stride  # (b,4,hw)
            points, _ = make_anchors([(h, w)], [stride])
            xy = points.T.unsqueeze(0)  # (1,2,hw)
            x1y1 = xy - sides[:, :2]
            x2y2 = xy + sides[:, 2:]
            boxes = torch.cat((x1y1, x2y2), dim=1)  # (b,4,hw)
            scores = cls_t.view(b, raw.nc, h * w).sigmoid()
            per_level.append((boxes, scores))
        for i in range(batch):
            boxes = torch.cat([lv[0][i] for lv in per_level], dim=1).T.numpy()
            scores = torch.cat([lv[1][i] for lv in per_level], dim=1).T.numpy()
            cls_ids = scores.argmax(axis=1)
            best = scores[np.arange(len(cls_ids)), cls_ids]
            keep = best >= conf_threshold
            boxes, cls_ids, best = boxes[keep], cls_ids[keep], best[keep]
            if len(best) > MAX_CANDIDATES:
                top = np.argsort(-best, kind="stable")[:MAX_CANDIDATES]
                boxes, cls_ids, best = boxes[top], cls_ids[top], best[top]
            dets = [
                DetectionBox(int(c), float(s), float(b[0]), float(b[1]), float(b[2]), float(b[3]))
                for c, s, b in zip(cls_ids, best, boxes)
                if b[2] > b[0] and b[3] > b[1]
            ]
            results.append(dets)
    return results


def _sort_order(scores, x1, y1):
    # score desc, then smaller x1, then smaller y1 (lexsort: last key is primary)
    return np.lexsort((y1, x1, -scores))


def nms(candidates, iou_threshold: float = NMS_IOU_THRESHOLD, max_det: int = MAX_DETECTIONS):
    """Class-wise greedy suppression with deterministic tie-breaking."""
    if not candidates:
        return []
    boxes = np.array([d.xyxy for d in candidates], dtype=np.float64)
    scores = np.array([d.score for d in candidates], dtype=np.float64)
    classes = np.array([d.class_id for d in candidates], dtype=np.int64)
    kept = []
    for cls in np.unique(classes):
        idx = np.nonzero(classes == cls)[0]
        order = idx[_sort_order(scores[idx], boxes[idx, 0], boxes[idx, 1])]
        keep_local = boxops.nms_suppress(np.ascontiguousarray(boxes[order]), float(iou_threshold))
        kept.extend(order[keep_local])
    kept.sort(key=lambda i: (-scores[i], boxes[i, 0], boxes[i, 1]))
    return [candidates[i] for i in kept[:max_det]]


@dataclass
class EvalResult:
    map50: float
    map50_95: float
    per_class_ap: dict = field(default_factory=dict)  # class_id -> [AP at each threshold]
    counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "map50": self.map50,
                "map50_95": self.map50_95,
                "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
                "counts": self.counts,
            },
            indent=2,
        )


def _interp_ap(recalls, precisions) -> float:
    """COCO 101-point interpolated average precision."""
    if len(recalls) == 0:
        return 0.0
    recalls = np.asarray(recalls)
    precisions = np.asarray(precisions)
    out = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recalls >= r - 1e-12
        out += precisions[mask].max() if mask.any() else 0.0
    return out / 101.0


def _match_class(preds, gts, thr):
    """Greedy matching of score-sorted predictions to unmatched GT of one class.

    ``preds``: list of (sort_key_tuple, img_idx, box); ``gts``: img_idx -> list of boxes.
    Returns the TP flag per prediction, in sorted order.
    """
    matched = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in gts.items()}
    tp = np.zeros(len(preds), dtype=bool)
    for i, (_, img, box) in enumerate(preds):
        boxes = gts.get(img)
        if boxes is None or len(boxes) == 0:
            continue
        ious = boxops.iou_matrix(np.asarray([box], dtype=np.float64),
                                 np.asarray(boxes, dtype=np.float64))[0]
        ious[matched[img]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= thr:
            matched[img][j] = True
            tp[i] = True
    return tp


def compute_map(predictions, ground_truth, iou_thresholds=COCO_IOU_THRESHOLDS) -> EvalResult:
    """COCO-style mAP over the given IoU thresholds.

    ``predictions``: per image, a list of DetectionBox.  ``ground_truth``: per
    image, a list of ``(class_id, x1, y1, x2, y2)`` (or objects with those
    attributes).  Classes without ground truth are excluded from the means.
    """
    if len(predictions) != len(ground_truth):
        raise ConfigError("predictions and ground_truth must cover the same images")
    gt_by_class: dict[int, dict[int, list]] = {}
    n_gt = 0
    for img, boxes in enumerate(ground_truth):
        for g in boxes:
            cls, x1, y1, x2, y2 = (
                (g.class_id, *g.xyxy) if isinstance(g, DetectionBox) else (int(g[0]), *map(float, g[1:5]))
            )
            gt_by_class.setdefault(cls, {}).setdefault(img, []).append((x1, y1, x2, y2))
            n_gt += 1
    if n_gt == 0:
        raise NumericError("mAP undefined: no ground-truth boxes in any class")

    preds_by_class: dict[int, list] = {c: [] for c in gt_by_class}
    n_pred = 0
    for img, dets in enumerate(predictions):
        for d in dets:
            n_pred += 1
            if d.class_id in preds_by_class:
                key = (-d.score, img, d.x1, d.y1, d.x2, d.y2)
                preds_by_class[d.class_id].append((key, img, d.xyxy))

    per_class_ap = {}
    for cls, gts in gt_by_class.items():
        preds = sorted(preds_by_class[cls], key=lambda p: p[0])
        total_gt = sum(len(v) for v in gts.values())
        aps = []
        for thr in iou_thresholds:
            tp = _match_class(preds, gts, thr)
            tp_cum = np.cumsum(tp)
            fp_cum = np.cumsum(~tp)
            recalls = tp_cum / total_gt
            precisions = tp_cum / np.maximum(tp_cum + fp_cum, 1)
            aps.append(_interp_ap(recalls, precisions))
        per_class_ap[cls] = aps

    idx50 = iou_thresholds.index(0.5) if 0.5 in iou_thresholds else 0
    map50 = float(np.mean([aps[idx50] for aps in per_class_ap.values()]))
    map50_95 = float(np.mean([np.mean(aps) for aps in per_class_ap.values()]))
    return EvalResult(
        map50=map50,
        map50_95=map50_95,
        per_class_ap=per_class_ap,
        counts={"images": len(predictions), "gt": n_gt, "pred": n_pred},
    )


def benchmark_fps(model, n_warmup: int = 10, n_runs: int = 50, input_shape=(3, 640, 640)):
    """Single-image (bs=1) inference latency; preprocessing and NMS excluded."""
    if n_runs < 1:
        raise ValueError(f"n_runs must be >= 1, got {n_runs}")
    if n_warmup < 0:
        raise ValueError(f"n_warmup must be >= 0, got {n_warmup}")
    is_module = isinstance(model, torch.nn.Module)
    x = torch.randn(1, *input_shape)
    if is_module:
        was_training = model.training
        model.eval()
    times_ms = []
    with torch.no_grad():
        for _ in range(n_warmup):
            model(x)
        for _ in range(n_runs):
            t0 = time.perf_counter()
            model(x)
            times_ms.append((time.perf_counter() - t0) * 1000.0)
    if is_module:
        model.train(was_training)
    mean_ms = float(np.mean(times_ms))
    std_ms = float(np.std(times_ms))
    return {
        "mean_ms": mean_ms,
        "std_ms": std_ms,
        "fps": 1000.0 / mean_ms,
        "times_ms": times_ms,
    }


def save_predictions(path, detections):
    """Write one prediction file: lines of ``class_id score x1 y1 x2 y2``."""
    with open(path, "w") as f:
        for d in detections:
            f.write(f"{d.class_id} {d.score:.6f} {d.x1:.2f} {d.y1:.2f} {d.x2:.2f} {d.y2:.2f}\n")


def load_predictions(path):
    """Read a prediction file written by :func:`save_predictions`."""
    dets = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ConfigError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            cls, score, x1, y1, x2, y2 = parts
            dets.append(DetectionBox(int(cls), float(score), float(x1), float(y1), float(x2), float(y2)))
    return dets
