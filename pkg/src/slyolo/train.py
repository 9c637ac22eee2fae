"""Desk-scale training: task-aligned target assignment, BCE + CIoU + DFL loss,
and a seeded SGD loop with CSV logging and best/last checkpoints.

Training hyperparameters follow the baseline conventions of this model family
(SGD momentum 0.937, loss gains box 7.5 / cls 0.5 / dfl 1.5, 3-epoch warmup,
cosine decay); the desk profile runs the 16-image synthetic set, the full
VisDrone profile is shipped as configuration only.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .data import VisDroneDataset, dataset_iterator, unletterbox_boxes
from .errors import ConfigError, NumericError
from .evalkit import compute_map, decode, make_anchors, nms
from .model import DetectionModel, RawPrediction, save_checkpoint

log = logging.getLogger(__name__)

ASSIGN_TOPK = 10
ASSIGN_ALPHA = 0.5
ASSIGN_BETA = 6.0
EPS = 1e-9


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    image_size: int = 192
    lr0: float = 0.01
    lrf: float = 0.01            # final LR as a fraction of lr0 (cosine floor)
    momentum: float = 0.937
    weight_decay: float = 5e-4
    warmup_epochs: float = 3.0
    box_gain: float = 7.5
    cls_gain: float = 0.5
    dfl_gain: float = 1.5
    seed: int = 0
    augment: bool = False
    eval_interval: int = 10
    conf_threshold: float = 0.001
    nms_iou: float = 0.7

    def __post_init__(self):
        if self.image_size % 32:
            raise ConfigError(f"image_size must be divisible by 32, got {self.image_size}")
        for name in ("box_gain", "cls_gain", "dfl_gain", "lr0", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    @classmethod
    def from_yaml(cls, path) -> "TrainConfig":
        with open(path) as f:
            try:
                doc = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {path}: {e}") from e
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


def bbox_iou_aligned(box1: torch.Tensor, box2: torch.Tensor, ciou: bool = False) -> torch.Tensor:
    """IoU (optionally complete IoU) of aligned xyxy box rows."""
    x1 = torch.maximum(box1[..., 0], box2[..., 0])
    y1 = torch.maximum(box1[..., 1], box2[..., 1])
    x2 = torch.minimum(box1[..., 2], box2[..., 2])
    y2 = torch.minimum(box1[..., 3], box2[..., 3])
    inter = (x2 - x1).clamp(0) * (y2 - y1).clamp(0)
    w1, h1 = box1[..., 2] - box1[..., 0], box1[..., 3] - box1[..., 1]
    w2, h2 = box2[..., 2] - box2[..., 0], box2[..., 3] - box2[..., 1]
    union = w1 * h1 + w2 * h2 - inter
    iou = inter / (union + EPS)
    if not ciou:
        return iou
    cw = torch.maximum(box1[..., 2], box2[..., 2]) - torch.minimum(box1[..., 0], box2[..., 0])
    ch = torch.maximum(box1[..., 3], box2[..., 3]) - torch.minimum(box1[..., 1], box2[..., 1])
    c2 = cw.pow(2) + ch.pow(2) + EPS
    rho2 = ((box1[..., 0] + box1[..., 2] - box2[..., 0] - box2[..., 2]).pow(2)
            + (box1[..., 1] + box1[..., 3] - box2[..., 1] - box2[..., 3]).pow(2)) / 4
    v = (4 / math.pi**2) * (torch.atan(w2 / (h2 + EPS)) - torch.atan(w1 / (h1 + EPS))).pow(2)
    # differentiable trade-off term; 1e-7 keeps the denominator representable
    # in float32 when iou == 1
    alpha = v / (v - iou + (1 + 1e-7))
    return iou - rho2 / c2 - alpha * v


def pairwise_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """IoU matrix between boxes1[n,4] and boxes2[m,4]."""
    x1 = torch.maximum(boxes1[:, None, 0], boxes2[None, :, 0])
    y1 = torch.maximum(boxes1[:, None, 1], boxes2[None, :, 1])
    x2 = torch.minimum(boxes1[:, None, 2], boxes2[None, :, 2])
    y2 = torch.minimum(boxes1[:, None, 3], boxes2[None, :, 3])
    inter = (x2 - x1).clamp(0) * (y2 - y1).clamp(0)
    a1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    a2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])
    return inter / (a1[:, None] + a2[None, :] - inter + EPS)


@dataclass
class AssignmentResult:
    """Per-anchor assignment for one image."""

    fg_mask: torch.Tensor        # (N,) bool
    matched_gt: torch.Tensor     # (N,) long, -1 for background
    target_scores: torch.Tensor  # (N, nc) alignment-weighted class targets
    target_boxes: torch.Tensor   # (N, 4) xyxy pixels (zeros for background)
    align: torch.Tensor          # (N,) alignment metric of the matched pair


def assign_targets(pred_scores: torch.Tensor, pred_boxes: torch.Tensor,
                   anchor_points: torch.Tensor, gt_boxes: torch.Tensor,
                   gt_classes: torch.Tensor, topk: int = ASSIGN_TOPK,
                   alpha: float = ASSIGN_ALPHA, beta: float = ASSIGN_BETA) -> AssignmentResult:
    """Task-aligned assignment for one image.

    Alignment metric = score^alpha * IoU^beta over anchors whose center lies
    inside the GT box; the top-k aligned anchors per GT become positives, and
    an anchor claimed by several GTs goes to the one with highest IoU.
    """
    n, nc = pred_scores.shape
    m = gt_boxes.shape[0]
    device = pred_scores.device
    if m == 0:
        return AssignmentResult(
            fg_mask=torch.zeros(n, dtype=torch.bool, device=device),
            matched_gt=torch.full((n,), -1, dtype=torch.long, device=device),
            target_scores=torch.zeros(n, nc, device=device, dtype=pred_scores.dtype),
            target_boxes=torch.zeros(n, 4, device=device, dtype=pred_boxes.dtype),
            align=torch.zeros(n, device=device, dtype=pred_scores.dtype),
        )

    inside = (
        (anchor_points[:, None, 0] > gt_boxes[None, :, 0] + EPS)
        & (anchor_points[:, None, 0] < gt_boxes[None, :, 2] - EPS)
        & (anchor_points[:, None, 1] > gt_boxes[None, :, 1] + EPS)
        & (anchor_points[:, None, 1] < gt_boxes[None, :, 3] - EPS)
    )  # (N, M)
    overlaps = pairwise_iou(pred_boxes, gt_boxes).clamp(0)
    cls_scores = pred_scores[:, gt_classes]  # (N, M)
    align = cls_scores.clamp(min=0).pow(alpha) * overlaps.pow(beta)
    align = align * inside

    k = min(topk, n)
    candidate = torch.zeros_like(align, dtype=torch.bool)
    top_vals, top_idx = align.topk(k, dim=0)
    valid = top_vals > EPS
    candidate.scatter_(0, top_idx, valid)

    conflict = candidate.sum(dim=1) > 1
    if conflict.any():
        # an anchor claimed by several GTs goes to the claiming GT with highest IoU
        masked = torch.where(candidate, overlaps, torch.full_like(overlaps, -1.0))
        best_gt = masked.argmax(dim=1)
        resolved = torch.zeros_like(candidate)
        resolved[torch.arange(n, device=device), best_gt] = True
        candidate = torch.where(conflict[:, None], resolved, candidate)

    fg_mask = candidate.any(dim=1)
    matched_gt = torch.where(fg_mask, candidate.float().argmax(dim=1), torch.full((n,), -1, device=device))
    matched_gt = matched_gt.long()

    align_pos = align * candidate
    per_gt_max_align = align_pos.amax(dim=0)
    per_gt_max_iou = (overlaps * candidate).amax(dim=0)
    norm = per_gt_max_iou / (per_gt_max_align + EPS)

    target_scores = torch.zeros(n, nc, device=device, dtype=pred_scores.dtype)
    target_boxes = torch.zeros(n, 4, device=device, dtype=pred_boxes.dtype)
    matched_align = torch.zeros(n, device=device, dtype=pred_scores.dtype)
    idx = fg_mask.nonzero(as_tuple=True)[0]
    if len(idx):
        gts = matched_gt[idx]
        matched_align[idx] = align[idx, gts]
        target_scores[idx, gt_classes[gts]] = align[idx, gts] * norm[gts]
        target_boxes[idx] = gt_boxes[gts]
    return AssignmentResult(fg_mask, matched_gt, target_scores, target_boxes, matched_align)


def _flatten_prediction(raw: RawPrediction):
    """Concatenate levels: (B, N, 4*reg_max), (B, N, nc), anchors, strides."""
    b = raw.box[0].shape[0]
    dist = torch.cat([t.flatten(2).transpose(1, 2) for t in raw.box], dim=1)
    cls = torch.cat([t.flatten(2).transpose(1, 2) for t in raw.cls], dim=1)
    hw = [(t.shape[2], t.shape[3]) for t in raw.box]
    points, strides = make_anchors(hw, raw.strides)
    return dist.reshape(b, -1, 4, raw.reg_max), cls, points.to(dist), strides.to(dist)


def _dist_to_boxes(dist: torch.Tensor, points: torch.Tensor, strides: torch.Tensor,
                   reg_max: int) -> torch.Tensor:
    """Expected side distances -> xyxy pixel boxes around anchor points."""
    bins = torch.arange(reg_max, dtype=dist.dtype, device=dist.device)
    sides = (dist.softmax(dim=-1) * bins).sum(-1) * strides  # (N, 4) pixels
    return torch.cat((points - sides[:, :2], points + sides[:, 2:]), dim=-1)


def _dfl_loss(pred_dist: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Distribution focal loss: cross-entropy split between the two nearest bins."""
    tl = target.floor().long()
    tr = tl + 1
    wl = tr.to(target.dtype) - target
    wr = 1 - wl
    left = F.cross_entropy(pred_dist.flatten(0, 1), tl.flatten(), reduction="none").view(tl.shape)
    right = F.cross_entropy(pred_dist.flatten(0, 1), tr.clamp(max=pred_dist.shape[-1] - 1).flatten(),
                            reduction="none").view(tl.shape)
    return (left * wl + right * wr).mean(-1)


def assign_batch(raw: RawPrediction, targets, image_size: int):
    """Assign every image of a batch.

    ``targets``: per image, an (n, 5) array of class_id, cx, cy, w, h
    normalized to the canvas.  Assignment consumes detached predictions; the
    returned results are constants with respect to the raw logits.
    """
    dist_b, cls_b, points, strides = _flatten_prediction(raw)
    dtype = dist_b.dtype
    out = []
    with torch.no_grad():
        for i in range(dist_b.shape[0]):
            pred_boxes = _dist_to_boxes(dist_b[i], points, strides, raw.reg_max)
            t = np.asarray(targets[i], dtype=np.float64).reshape(-1, 5)
            if len(t):
                cxcywh = torch.from_numpy(t[:, 1:]).to(dtype) * image_size
                gt_boxes = torch.cat(
                    (cxcywh[:, :2] - cxcywh[:, 2:] / 2, cxcywh[:, :2] + cxcywh[:, 2:] / 2), dim=1
                )
                gt_classes = torch.from_numpy(t[:, 0]).long()
            else:
                gt_boxes = torch.zeros(0, 4, dtype=dtype)
                gt_classes = torch.zeros(0, dtype=torch.long)
            out.append(assign_targets(cls_b[i].sigmoid(), pred_boxes, points, gt_boxes, gt_classes))
    return out


def compute_loss(raw: RawPrediction, assignments,
                 box_gain: float = 7.5, cls_gain: float = 0.5, dfl_gain: float = 1.5):
    """Composite detection loss given per-image assignments.

    cls: BCE against alignment-weighted targets over all cells; box: 1 - CIoU
    over positives; dfl: distribution focal loss over positives.  Returns a
    dict of scalar tensors (total/box/cls/dfl), all validated finite.
    """
    dist_b, cls_b, points, strides = _flatten_prediction(raw)
    batch = dist_b.shape[0]
    if len(assignments) != batch:
        raise ConfigError(f"{len(assignments)} assignments for a batch of {batch}")
    reg_max = raw.reg_max
    zero = torch.zeros((), dtype=dist_b.dtype, device=dist_b.device)
    loss_box, loss_cls, loss_dfl = zero.clone(), zero.clone(), zero.clone()

    for i, assignment in enumerate(assignments):
        dist = dist_b[i]
        cls_logits = cls_b[i]
        pred_boxes = _dist_to_boxes(dist, points, strides, reg_max)
        target_scores = assignment.target_scores
        normalizer = target_scores.sum().clamp(min=1)

        loss_cls = loss_cls + F.binary_cross_entropy_with_logits(
            cls_logits, target_scores, reduction="sum"
        ) / normalizer

        fg = assignment.fg_mask
        if fg.any():
            weight = target_scores[fg].sum(-1)
            ciou = bbox_iou_aligned(pred_boxes[fg], assignment.target_boxes[fg], ciou=True)
            loss_box = loss_box + ((1.0 - ciou) * weight).sum() / normalizer

            lt = (points[fg] - assignment.target_boxes[fg][:, :2]) / strides[fg]
            rb = (assignment.target_boxes[fg][:, 2:] - points[fg]) / strides[fg]
            side_targets = torch.cat((lt, rb), dim=1).clamp(0, reg_max - 1 - 0.01)
            dfl = _dfl_loss(dist[fg], side_targets)
            loss_dfl = loss_dfl + (dfl * weight).sum() / normalizer

    loss_box, loss_cls, loss_dfl = loss_box / batch, loss_cls / batch, loss_dfl / batch
    total = box_gain * loss_box + cls_gain * loss_cls + dfl_gain * loss_dfl
    for name, term in (("total", total), ("box", loss_box), ("cls", loss_cls), ("dfl", loss_dfl)):
        if not torch.isfinite(term):
            raise NumericError(f"non-finite {name} loss term")
    return {"total": total, "box": loss_box, "cls": loss_cls, "dfl": loss_dfl}


def detection_loss(raw: RawPrediction, targets, image_size: int,
                   box_gain: float = 7.5, cls_gain: float = 0.5, dfl_gain: float = 1.5):
    """Assign then score: the one-call form used by the training loop."""
    return compute_loss(raw, assign_batch(raw, targets, image_size),
                        box_gain, cls_gain, dfl_gain)


def evaluate_model(model: DetectionModel, dataset: VisDroneDataset,
                   conf_threshold: float = 0.25, nms_iou: float = 0.7):
    """Run inference over a dataset and score mAP in original-image pixel space."""
    was_training = model.training
    model.eval()
    predictions, ground_truth = [], []
    size = dataset.image_size
    with torch.no_grad():
        for i in range(len(dataset)):
            sample = dataset.load(i)
            raw = model(sample.image.unsqueeze(0))
            dets = nms(decode(raw, conf_threshold)[0], nms_iou)
            if dets:
                arr = unletterbox_boxes(np.array([d.xyxy for d in dets]), sample.meta)
                mapped = []
                for d, row in zip(dets, arr):
                    if row[2] - row[0] > 1e-3 and row[3] - row[1] > 1e-3:
                        mapped.append(type(d)(d.class_id, d.score, *row))
                predictions.append(mapped)
            else:
                predictions.append([])
            gts = []
            for cls, cx, cy, w, h in sample.boxes:
                xyxy = np.array([[(cx - w / 2) * size, (cy - h / 2) * size,
                                  (cx + w / 2) * size, (cy + h / 2) * size]])
                x1, y1, x2, y2 = unletterbox_boxes(xyxy, sample.meta)[0]
                gts.append((int(cls), x1, y1, x2, y2))
            ground_truth.append(gts)
    model.train(was_training)
    return compute_map(predictions, ground_truth)


def _param_groups(model, weight_decay):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim == 1 or name.endswith(".bias"):
            no_decay.append(p)  # bn weights/biases, conv biases, fusion weights
        else:
            decay.append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def train_loop(model: DetectionModel, train_data: VisDroneDataset,
               val_data: VisDroneDataset | None, cfg: TrainConfig, out_dir,
               progress: bool = True):
    """Seeded SGD training with per-epoch CSV logging and best/last checkpoints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model.train()

    optimizer = torch.optim.SGD(
        _param_groups(model, cfg.weight_decay), lr=cfg.lr0, momentum=cfg.momentum, nesterov=True
    )
    steps_per_epoch = max(1, math.ceil(len(train_data) / cfg.batch_size))
    warmup_steps = max(1, round(cfg.warmup_epochs * steps_per_epoch))
    val_data = val_data or train_data

    history = []
    best_map = -1.0
    step = 0
    csv_path = out_dir / "log.csv"
    with open(csv_path, "w", newline="") as f:
        csv.writer(f).writerow(
            ["epoch", "loss_total", "loss_box", "loss_cls", "loss_dfl", "map50", "map50_95"]
        )

    for epoch in range(cfg.epochs):
        sums = {"total": 0.0, "box": 0.0, "cls": 0.0, "dfl": 0.0}
        n_batches = 0
        for batch in dataset_iterator(train_data, "train", cfg.batch_size, cfg.seed,
                                      augment=cfg.augment, epoch=epoch):
            cosine = cfg.lrf + (1 - cfg.lrf) * 0.5 * (1 + math.cos(math.pi * epoch / cfg.epochs))
            warm = min(1.0, (step + 1) / warmup_steps)
            for group in optimizer.param_groups:
                group["lr"] = cfg.lr0 * cosine * warm

            images = torch.stack([s.image for s in batch])
            targets = [s.boxes for s in batch]
            raw = model(images)
            try:
                losses = detection_loss(raw, targets, cfg.image_size,
                                        cfg.box_gain, cfg.cls_gain, cfg.dfl_gain)
            except NumericError as e:
                raise NumericError(f"training diverged at step {step}: {e}") from e
            optimizer.zero_grad()
            losses["total"].backward()
            optimizer.step()
            for key in sums:
                sums[key] += float(losses[key].detach())
            n_batches += 1
            step += 1

        means = {k: v / n_batches for k, v in sums.items()}
        evaluate = (epoch + 1) % cfg.eval_interval == 0 or epoch == cfg.epochs - 1
        map50 = map50_95 = None
        if evaluate:
            result = evaluate_model(model, val_data, conf_threshold=cfg.conf_threshold,
                                    nms_iou=cfg.nms_iou)
            map50, map50_95 = result.map50, result.map50_95
            if map50 > best_map:
                best_map = map50
                save_checkpoint(model, out_dir / "best.pt", extra={"epoch": epoch, "map50": map50})
        if progress:
            msg = (f"epoch {epoch + 1}/{cfg.epochs}  loss {means['total']:.4f} "
                   f"(box {means['box']:.4f} cls {means['cls']:.4f} dfl {means['dfl']:.4f})")
            if map50 is not None:
                msg += f"  map50 {map50:.3f}"
            log.info(msg)
        with open(csv_path, "a", newline="") as f:
            csv.writer(f).writerow(
                [epoch + 1, f"{means['total']:.6f}", f"{means['box']:.6f}", f"{means['cls']:.6f}",
                 f"{means['dfl']:.6f}",
                 "" if map50 is None else f"{map50:.6f}",
                 "" if map50_95 is None else f"{map50_95:.6f}"]
            )
        history.append({"epoch": epoch + 1, **means, "map50": map50, "map50_95": map50_95})

    save_checkpoint(model, out_dir / "last.pt", extra={"epoch": cfg.epochs})
    if best_map < 0:
        save_checkpoint(model, out_dir / "best.pt", extra={"epoch": cfg.epochs})
    return history
