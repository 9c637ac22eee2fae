"""Command-line entry point.

Subcommands: analyze, train, eval, fuse, predict, bench, synth.  Exit codes
are a stable contract: 0 success, 2 config/usage error, 3 state error,
4 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from . import train as train_mod
from .complexity import audit_model
from .data import VisDroneDataset, generate_synthetic_dataset, letterbox, unletterbox_boxes
from .errors import ConfigError, NumericError, SLYoloError, StateError
from .evalkit import (benchmark_fps, compute_map, decode, load_predictions, nms,
                      save_predictions)
from .model import (ModelConfig, build_model, load_checkpoint, save_checkpoint)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STATE = 3
EXIT_RUNTIME = 4


def _parse_overrides(pairs):
    overrides = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like key=value")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _load_config(args) -> ModelConfig:
    cfg = ModelConfig.from_yaml(args.config) if args.config else ModelConfig()
    return cfg.apply_overrides(_parse_overrides(getattr(args, "set", None)))


def cmd_analyze(args):
    if args.matrix:
        print(f"{'neck':<7} {'block':<7} {'down':<7} {'p2':<5} {'params(M)':>10} {'GFLOPs':>8}")
        rows = []
        for neck, block, down, p2 in itertools.product(
            ("pan", "bifpn", "hepan"), ("c3", "c2f", "c2fdcb"), ("conv", "scdown"), (True, False)
        ):
            cfg = ModelConfig(neck=neck, block=block, down=down, p2=p2)
            report = audit_model(build_model(cfg, seed=args.seed), (3, args.imgsz, args.imgsz))
            rows.append({"neck": neck, "block": block, "down": down, "p2": p2,
                         "params": report.total_params, "gflops": report.gflops})
            print(f"{neck:<7} {block:<7} {down:<7} {str(p2):<5} "
                  f"{report.params_millions:>10.2f} {report.gflops:>8.2f}")
        if args.json:
            print(json.dumps(rows, indent=2))
        return EXIT_OK
    cfg = _load_config(args)
    report = audit_model(build_model(cfg, seed=args.seed), (3, args.imgsz, args.imgsz))
    if args.json:
        print(report.to_json())
    else:
        print(report.to_text())
    return EXIT_OK


def cmd_synth(args):
    stems = generate_synthetic_dataset(args.out, seed=args.seed, n_images=args.n,
                                       image_size=args.imgsz, classes=args.classes)
    payload = {"root": str(args.out), "images": len(stems), "seed": args.seed,
               "image_size": args.imgsz}
    print(json.dumps(payload) if args.json else
          f"wrote {len(stems)} images to {args.out} (seed {args.seed}, size {args.imgsz})")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    tcfg = train_mod.TrainConfig.from_yaml(args.trainer) if args.trainer else train_mod.TrainConfig()
    for name in ("epochs", "batch_size", "image_size", "seed"):
        value = getattr(args, name)
        if value is not None:
            setattr(tcfg, name, value)
    tcfg.__post_init__()
    model = build_model(cfg, seed=tcfg.seed)
    train_ds = VisDroneDataset(args.data, "train", image_size=tcfg.image_size)
    try:
        val_ds = VisDroneDataset(args.data, "val", image_size=tcfg.image_size)
        if val_ds.base == train_ds.base:  # flat layout: validate on train set
            val_ds = train_ds
    except ConfigError:
        val_ds = train_ds
    history = train_mod.train_loop(model, train_ds, val_ds, tcfg, args.out)
    final = history[-1]
    summary = {"epochs": len(history), "final_loss": final["total"],
               "map50": final["map50"], "map50_95": final["map50_95"],
               "out": str(args.out)}
    print(json.dumps(summary) if args.json else
          f"trained {len(history)} epochs; final loss {final['total']:.4f}, "
          f"mAP50 {final['map50']:.3f} -> {args.out}")
    return EXIT_OK


def cmd_eval(args):
    if args.preds:
        ds = VisDroneDataset(args.data, args.split, image_size=args.imgsz)
        predictions, ground_truth = [], []
        for img_path, ann_path in ds.items:
            pred_path = Path(args.preds) / f"{img_path.stem}.txt"
            predictions.append(load_predictions(pred_path) if pred_path.is_file() else [])
            from .data import load_annotations

            gts = []
            for r in load_annotations(ann_path):
                gts.append((r.class_id, r.bbox_left, r.bbox_top,
                            r.bbox_left + r.bbox_width, r.bbox_top + r.bbox_height))
            ground_truth.append(gts)
        result = compute_map(predictions, ground_truth)
    else:
        if not args.checkpoint:
            raise ConfigError("eval requires --checkpoint or --preds")
        model, _ = load_checkpoint(args.checkpoint)
        ds = VisDroneDataset(args.data, args.split, image_size=args.imgsz)
        result = train_mod.evaluate_model(model, ds, conf_threshold=args.conf, nms_iou=args.nms_iou)
    if args.json:
        print(result.to_json())
    else:
        print(f"mAP50: {100 * result.map50:.1f}")
        print(f"mAP50-95: {100 * result.map50_95:.1f}")
    return EXIT_OK


def cmd_fuse(args):
    model, payload = load_checkpoint(args.checkpoint)
    if payload["fused"]:
        raise StateError(f"{args.checkpoint} is already fused")
    params_before = sum(p.numel() for p in model.parameters())
    torch.manual_seed(0)
    probe = torch.randn(1, 3, args.imgsz, args.imgsz)
    model.eval()
    with torch.no_grad():
        before = model(probe)
        model.fuse()
        after = model(probe)
    deviation = 0.0
    for a, b in zip(before.box + before.cls, after.box + after.cls):
        deviation = max(deviation, float((a - b).abs().max()))
    params_after = sum(p.numel() for p in model.parameters())
    save_checkpoint(model, args.out, extra={"fused_from": str(args.checkpoint)})
    payload_out = {"out": str(args.out), "max_abs_deviation": deviation,
                   "params_before": params_before, "params_after": params_after}
    if args.json:
        print(json.dumps(payload_out))
    else:
        print(f"fused -> {args.out}")
        print(f"max abs output deviation on random probe: {deviation:.3e}")
        print(f"params: {params_before:,} -> {params_after:,}")
    if deviation >= 1e-4:
        raise NumericError(f"fusion deviation {deviation:.3e} exceeds 1e-4")
    return EXIT_OK


def cmd_predict(args):
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    src = Path(args.source)
    paths = sorted(p for p in (src.iterdir() if src.is_dir() else [src])
                   if p.suffix.lower() in (".jpg", ".jpeg", ".png", ".bmp"))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_done = 0
    for path in paths:
        image = cv2.imread(str(path))
        if image is None:
            logging.warning("skipping unreadable image %s", path)
            continue
        sample = letterbox(image, target=args.imgsz)
        with torch.no_grad():
            raw = model(sample.image.unsqueeze(0))
        dets = nms(decode(raw, args.conf)[0], args.nms_iou)
        mapped = []
        if dets:
            arr = unletterbox_boxes(np.array([d.xyxy for d in dets]), sample.meta)
            for d, row in zip(dets, arr):
                if row[2] - row[0] > 1e-3 and row[3] - row[1] > 1e-3:
                    mapped.append(type(d)(d.class_id, d.score, *row))
        save_predictions(out_dir / f"{path.stem}.txt", mapped)
        annotated = image.copy()
        for d in mapped:
            p1, p2 = (int(d.x1), int(d.y1)), (int(d.x2), int(d.y2))
            cv2.rectangle(annotated, p1, p2, (0, 220, 40), 1)
            cv2.putText(annotated, f"{d.class_id}:{d.score:.2f}", (p1[0], max(10, p1[1] - 2)),
                        cv2.FONT_HERSHEY_SIMPLEX, 0.35, (0, 220, 40), 1)
        cv2.imwrite(str(out_dir / path.name), annotated)
        n_done += 1
    print(f"predicted {n_done} images -> {out_dir}")
    return EXIT_OK


def cmd_bench(args):
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = build_model(_load_config(args), seed=args.seed)
    stats = benchmark_fps(model, n_warmup=args.warmup, n_runs=args.runs,
                          input_shape=(3, args.imgsz, args.imgsz))
    if args.json:
        print(json.dumps({k: v for k, v in stats.items() if k != "times_ms"}))
    else:
        print(f"{stats['mean_ms']:.2f} ms +/- {stats['std_ms']:.2f} per image (bs=1), "
              f"FPS {stats['fps']:.1f}  [{args.runs} runs, {args.warmup} warmup]")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slyolo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", help="model config YAML")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("analyze", help="complexity report for a config")
    add_common(p)
    p.add_argument("--imgsz", type=int, default=640)
    p.add_argument("--matrix", action="store_true", help="sweep all 36 config variants")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synth", help="generate the synthetic small-object dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--imgsz", type=int, default=192)
    p.add_argument("--classes", type=int, default=10)
    add_common(p, config=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--trainer", help="train config YAML")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--imgsz", dest="image_size", type=int)
    p.set_defaults(func=cmd_train, seed=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint or prediction files")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--checkpoint")
    p.add_argument("--preds", help="directory of prediction text files")
    p.add_argument("--imgsz", type=int, default=640)
    p.add_argument("--conf", type=float, default=0.001)
    p.add_argument("--nms-iou", dest="nms_iou", type=float, default=0.7)
    add_common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="re-parameterize a checkpoint for deployment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--imgsz", type=int, default=320)
    add_common(p, config=False)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("predict", help="render predictions onto images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--imgsz", type=int, default=640)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms-iou", dest="nms_iou", type=float, default=0.7)
    add_common(p, config=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="single-image latency benchmark")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--imgsz", type=int, default=640)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--warmup", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StateError as e:
        print(f"state error: {e}", file=sys.stderr)
        return EXIT_STATE
    except (SLYoloError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
