"""Annotation parsing, letterbox arithmetic, synthetic generator, iterator."""

import hashlib
import logging
from pathlib import Path

import cv2
import numpy as np
import pytest
import torch

from slyolo.data import (
    AnnotationRecord,
    VisDroneDataset,
    _augment,
    dataset_iterator,
    generate_synthetic_dataset,
    letterbox,
    load_annotations,
    parse_visdrone_line,
    unletterbox_boxes,
)
from slyolo.errors import AnnotationParseError


class TestParse:
    def test_devkit_field_order(self):
        rec = parse_visdrone_line("100,200,50,40,1,4,0,1")
        assert (rec.bbox_left, rec.bbox_top) == (100, 200)
        assert (rec.bbox_left + rec.bbox_width, rec.bbox_top + rec.bbox_height) == (150, 240)
        assert rec.class_id == 3
        assert rec.occlusion == 1

    def test_zero_width_rejected(self):
        assert parse_visdrone_line("0,0,0,10,1,1,0,0") is None

    def test_ignored_region_rejected(self):
        assert parse_visdrone_line("10,10,5,5,0,0,0,0") is None

    def test_others_class_rejected(self):
        assert parse_visdrone_line("10,10,5,5,1,11,0,0") is None

    def test_malformed_reports_line_number(self):
        with pytest.raises(AnnotationParseError) as err:
            parse_visdrone_line("1,2,3", line_number=17)
        assert err.value.line_number == 17
        with pytest.raises(AnnotationParseError):
            parse_visdrone_line("a,b,c,d,e,f,g,h", line_number=2)

    def test_trailing_comma_tolerated(self):
        assert parse_visdrone_line("10,10,5,5,1,3,0,0,").category == 3

    def test_roundtrip(self):
        line = "10,20,30,40,1,5,2,1"
        rec = parse_visdrone_line(line)
        assert rec.to_line() == line
        assert parse_visdrone_line(rec.to_line()) == rec


class TestLetterbox:
    def test_wide_image_padding(self):
        img = np.zeros((765, 1360, 3), dtype=np.uint8)
        sample = letterbox(img, target=640)
        assert sample.meta["scale"] == pytest.approx(640 / 1360)
        assert sample.meta["pad_y"] == 140 and sample.meta["pad_x"] == 0
        # content occupies rows 140..500
        canvas = (sample.image.permute(1, 2, 0).numpy() * 255).astype(np.uint8)
        assert (canvas[:140] == 114).all() and (canvas[500:] == 114).all()

    def test_identity(self):
        img = np.random.default_rng(0).integers(0, 255, (640, 640, 3), dtype=np.uint8)
        sample = letterbox(img, [(0, 10, 20, 30, 40)], target=640)
        assert sample.meta["scale"] == 1.0 and sample.meta["pad_x"] == 0
        cls, cx, cy, w, h = sample.boxes[0]
        assert (cx * 640, cy * 640) == pytest.approx((25, 40))
        assert (w * 640, h * 640) == pytest.approx((30, 40))

    def test_corner_box_stays_inside(self):
        img = np.zeros((300, 500, 3), dtype=np.uint8)
        sample = letterbox(img, [(1, 0, 0, 40, 40)], target=640)
        cls, cx, cy, w, h = sample.boxes[0]
        assert 0 <= cx - w / 2 and 0 <= cy - h / 2
        assert cx + w / 2 <= 1 and cy + h / 2 <= 1

    def test_inverse_recovers_pixels(self):
        rng = np.random.default_rng(1)
        img = np.zeros((721, 1111, 3), dtype=np.uint8)
        boxes = []
        for _ in range(10):
            x1, y1 = rng.uniform(0, 900, 1)[0], rng.uniform(0, 500, 1)[0]
            w, h = rng.uniform(5, 150, 2)
            boxes.append((0, x1, y1, min(w, 1111 - x1), min(h, 721 - y1)))
        sample = letterbox(img, boxes, target=640)
        size = sample.meta["target"]
        for (cls, left, top, bw, bh), row in zip(boxes, sample.boxes):
            _, cx, cy, w, h = row
            canvas_xyxy = np.array([[(cx - w / 2) * size, (cy - h / 2) * size,
                                     (cx + w / 2) * size, (cy + h / 2) * size]])
            x1, y1, x2, y2 = unletterbox_boxes(canvas_xyxy, sample.meta)[0]
            assert abs(x1 - left) < 0.5 and abs(y1 - top) < 0.5
            assert abs(x2 - (left + bw)) < 0.5 and abs(y2 - (top + bh)) < 0.5

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError):
            letterbox(np.zeros((0, 0, 3), dtype=np.uint8))


def tree_checksums(root):
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


class TestSyntheticDataset:
    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_synthetic_dataset(a, seed=7, n_images=6, image_size=128)
        generate_synthetic_dataset(b, seed=7, n_images=6, image_size=128)
        assert tree_checksums(a) == tree_checksums(b)
        generate_synthetic_dataset(tmp_path / "c", seed=8, n_images=6, image_size=128)
        assert tree_checksums(a) != tree_checksums(tmp_path / "c")

    def test_annotations_reparse(self, synth_root):
        ann_files = sorted((synth_root / "annotations").iterdir())
        assert len(ann_files) == 16
        for path in ann_files:
            records = load_annotations(path)
            assert 5 <= len(records) <= 30
            for rec in records:
                assert 0 <= rec.class_id <= 9
                assert 4 <= rec.bbox_width <= 24 and 4 <= rec.bbox_height <= 24

    def test_class_histogram_roughly_uniform(self, tmp_path):
        root = tmp_path / "hist"
        generate_synthetic_dataset(root, seed=3, n_images=400, image_size=96)
        counts = np.zeros(10)
        for path in (root / "annotations").iterdir():
            for rec in load_annotations(path):
                counts[rec.class_id] += 1
        fractions = counts / counts.sum()
        assert np.all(np.abs(fractions - 0.1) < 0.02)

    def test_bad_args(self, tmp_path):
        with pytest.raises(ValueError):
            generate_synthetic_dataset(tmp_path, seed=0, n_images=0)


class TestIterator:
    def test_same_seed_same_batches(self, synth_root):
        def collect(seed):
            out = []
            for batch in dataset_iterator(synth_root, "train", 4, seed=seed, image_size=128):
                for s in batch:
                    out.append((s.meta["path"], s.image.sum().item(), s.boxes.tobytes()))
            return out

        assert collect(5) == collect(5)
        assert collect(5) != collect(6)

    def test_augment_deterministic(self, synth_root):
        def collect():
            batches = dataset_iterator(synth_root, "train", 4, seed=9, augment=True, image_size=128)
            return [s.image.sum().item() for b in batches for s in b]

        assert collect() == collect()

    def test_flip_reflects_x_centers(self):
        img = np.random.default_rng(0).integers(0, 255, (64, 64, 3), dtype=np.uint8)
        boxes = [(0, 8, 10, 16, 12), (1, 40, 30, 10, 20)]

        class FlipOnly:
            def random(self):
                return 0.0  # always flip

            def uniform(self, lo, hi):
                return 1.0  # no scale jitter

        flipped_img, flipped = _augment(img, boxes, FlipOnly())
        for (cls, left, top, w, h), (cls2, left2, top2, w2, h2) in zip(boxes, flipped):
            cx, cx2 = left + w / 2, left2 + w2 / 2
            assert cx2 == pytest.approx(64 - cx)
            assert top2 == top and w2 == w and h2 == h
        assert np.array_equal(flipped_img, img[:, ::-1])

    def test_boxes_stay_normalized_under_augmentation(self, synth_root):
        for epoch in range(3):
            for batch in dataset_iterator(synth_root, "train", 8, seed=4, augment=True,
                                          image_size=128, epoch=epoch):
                for s in batch:
                    if len(s.boxes):
                        corners = np.stack([
                            s.boxes[:, 1] - s.boxes[:, 3] / 2, s.boxes[:, 2] - s.boxes[:, 4] / 2,
                            s.boxes[:, 1] + s.boxes[:, 3] / 2, s.boxes[:, 2] + s.boxes[:, 4] / 2,
                        ])
                        assert corners.min() >= -1e-9 and corners.max() <= 1 + 1e-9

    def test_missing_annotation_skipped_with_warning(self, tmp_path, caplog):
        root = tmp_path / "ds"
        (root / "images").mkdir(parents=True)
        (root / "annotations").mkdir()
        img = np.zeros((32, 32, 3), dtype=np.uint8)
        cv2.imwrite(str(root / "images" / "a.jpg"), img)
        cv2.imwrite(str(root / "images" / "b.jpg"), img)
        (root / "annotations" / "a.txt").write_text("1,1,5,5,1,2,0,0\n")
        with caplog.at_level(logging.WARNING):
            ds = VisDroneDataset(root, "train", image_size=64)
        assert len(ds) == 1
        assert any("b.jpg" in r.message for r in caplog.records)

    def test_val_split_indexing_548(self, tmp_path):
        root = tmp_path / "visdrone"
        (root / "val" / "images").mkdir(parents=True)
        (root / "val" / "annotations").mkdir(parents=True)
        tile = np.zeros((8, 8, 3), dtype=np.uint8)
        ok, buf = cv2.imencode(".jpg", tile)
        assert ok
        data = buf.tobytes()
        for i in range(548):
            (root / "val" / "images" / f"{i:07d}.jpg").write_bytes(data)
            (root / "val" / "annotations" / f"{i:07d}.txt").write_text("1,1,4,4,1,1,0,0\n")
        assert len(VisDroneDataset(root, "val", image_size=64)) == 548
