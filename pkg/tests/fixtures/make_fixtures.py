"""Regenerate the committed test fixtures.

    python3 tests/fixtures/make_fixtures.py

stats_1000/     100 images x 10 labels in the internal format (pixels are 2x2 placeholders)
visdrone_mini/  three small PPM images with VisDrone-style annotations
eval_mini/      four synthetic images plus a hand-written detections file
"""
from pathlib import Path

import numpy as np

from hicyolo.boxes import Box, Detection, format_detection
from hicyolo.data import format_labels, make_synthetic, save_dataset, write_ppm

HERE = Path(__file__).resolve().parent


def stats_1000(root):
    rng = np.random.default_rng(2024)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for i in range(100):
        wh = np.clip(np.exp(rng.normal(-3.6, 0.9, (10, 2))), 1e-4, 0.9)
        cxy = rng.uniform(wh / 2, 1 - wh / 2)
        cls = rng.integers(0, 10, 10)
        labels = np.round(np.column_stack([cls, cxy, wh]), 6)
        write_ppm(root / "images" / f"img_{i:03d}.ppm", np.zeros((3, 2, 2)))
        (root / "labels" / f"img_{i:03d}.txt").write_text(format_labels(labels), encoding="utf-8")


def visdrone_mini(root):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(7)
    annotations = {
        "0000001_a": "0,0,10,6,1,1,0,0\n5,5,8,8,1,4,0,1\n30,20,20,20,1,10,1,0\n",
        # category 0 (ignored region) and 11 (others) are dropped; the last box lies outside the image
        "0000002_b": "1,1,4,4,0,0,0,0\n2,2,5,5,1,11,0,0\n12,9,6,3,1,2,0,0\n45,40,5,5,1,3,0,0\n",
        "0000003_c": "",
    }
    for stem, text in annotations.items():
        write_ppm(root / "images" / f"{stem}.ppm", np.rint(rng.random((3, 30, 40)) * 255) / 255)
        (root / "annotations" / f"{stem}.txt").write_text(text, encoding="utf-8")


def eval_mini(root):
    images = make_synthetic(4, size=64, num_classes=2, seed=11)
    save_dataset(root, images)
    lines = []
    for k, img in enumerate(images):
        for j, (c, cx, cy, w, h) in enumerate(img.labels):
            # mostly good boxes, with a shifted one, a wrong class and a duplicate
            shift = 6.0 if (k + j) % 3 == 2 else 0.5
            box = Box(cx * 64 + shift, cy * 64, w * 64, h * 64)
            lines.append(format_detection(Detection(box, round(0.9 - 0.05 * j - 0.01 * k, 6), int(c), img.id)))
            if j == 0:
                lines.append(format_detection(Detection(box, 0.3, int(c), img.id)))
                lines.append(format_detection(Detection(box, 0.2, 1 - int(c), img.id)))
    (root / "detections.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    stats_1000(HERE / "stats_1000")
    visdrone_mini(HERE / "visdrone_mini")
    eval_mini(HERE / "eval_mini")
