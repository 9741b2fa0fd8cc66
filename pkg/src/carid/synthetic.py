"""Generator for a tiny labeled toy corpus of colored vehicle-ish shapes.

Each class gets a fixed hue; images vary in shape, position, size and
background so the corpus exercises the full pipeline (bbox crops, dedup,
splits, training) at desk scale without the real photo collection.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

# Make/model/year labels so name parsing gets realistic structure.
CLASS_NAMES = (
    "Falcon Roadster 2018",
    "Comet Hatchback 2020",
    "Titan Pickup 2016",
    "Aurora Sedan 2019",
    "Vega Coupe 2021",
    "Orion Wagon 2015",
)

_BASE_COLORS = (
    (210, 40, 40),
    (40, 200, 45),
    (45, 60, 215),
    (220, 200, 35),
    (200, 45, 200),
    (40, 205, 205),
)


def generate_synthetic_corpus(
    root: Path | str,
    n_classes: int = 3,
    per_class: int = 30,
    image_size: int = 96,
    seed: int = 0,
) -> Path:
    """Write images/, annotations.csv and classes.txt under ``root``."""
    if not 2 <= n_classes <= len(CLASS_NAMES):
        raise ValueError(f"n_classes must be in [2, {len(CLASS_NAMES)}]")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    rows = []
    for class_id in range(n_classes):
        base = np.array(_BASE_COLORS[class_id], dtype=float)
        for i in range(per_class):
            canvas = np.full((image_size, image_size, 3),
                             rng.integers(10, 60), dtype=np.uint8)
            canvas += rng.integers(0, 12, size=canvas.shape, dtype=np.uint8)
            img = Image.fromarray(canvas)
            draw = ImageDraw.Draw(img)

            size = int(rng.integers(40, 64))
            x0 = int(rng.integers(4, image_size - size - 4))
            y0 = int(rng.integers(4, image_size - size - 4))
            color = tuple(int(c) for c in np.clip(base + rng.normal(0, 18, 3), 0, 255))
            shape = rng.integers(0, 3)
            box = (x0, y0, x0 + size, y0 + int(size * 0.7))
            if shape == 0:
                draw.rectangle(box, fill=color)
            elif shape == 1:
                draw.ellipse(box, fill=color)
            else:
                draw.rounded_rectangle(box, radius=size // 5, fill=color)
            # wheels, to make the blobs vaguely car-like
            wheel_y = box[3] - 2
            for wx in (box[0] + size // 5, box[2] - size // 5):
                draw.ellipse((wx - 6, wheel_y - 6, wx + 6, wheel_y + 6), fill=(15, 15, 15))

            rel = f"images/{class_id:02d}_{i:03d}.png"
            img.save(root / rel)

            # bbox: shape extent padded out, clamped, min side 60 px
            pad = 8
            bx0 = max(0, box[0] - pad)
            by0 = max(0, box[1] - pad)
            bx1 = min(image_size, box[2] + pad)
            by1 = min(image_size, box[3] + pad + 8)
            while bx1 - bx0 < 60:
                bx0, bx1 = max(0, bx0 - 2), min(image_size, bx1 + 2)
            while by1 - by0 < 60:
                by0, by1 = max(0, by0 - 2), min(image_size, by1 + 2)
            rows.append((rel, class_id, bx0, by0, bx1, by1))

    with open(root / "annotations.csv", "w", newline="") as fp:
        csv.writer(fp).writerows(rows)
    (root / "classes.txt").write_text(
        "".join(CLASS_NAMES[c] + "\n" for c in range(n_classes))
    )
    return root
