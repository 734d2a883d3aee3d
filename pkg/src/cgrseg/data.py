"""Synthetic segmentation data: colored shapes on a noise background.

Each sample is a full-range uniform-noise image with 1-3 non-overlapping
axis-aligned shapes (rectangles and ellipses) painted over it.  Every
foreground class has a fixed signature color (a function of the class id,
not of the sample), so the task is learnable: the model must map color
plus local context to the class id.  Masks label shape pixels with the
shape's class and everything else 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng, Tensor

__all__ = ["ToySample", "class_color", "gen_toy_sample"]

# per-shape bounding-box area fractions; with at most 3 shapes these keep
# total foreground between roughly 5% and 55% of the image
_RECT_FRAC = (0.08, 0.18)
_ELLIPSE_FRAC = (0.10, 0.18)
_COLOR_NOISE = 0.1
_MAX_TRIES = 40


@dataclass
class ToySample:
    image: Tensor  # (1, 3, H, W), values in [0, 1]
    mask: np.ndarray  # (H, W) integer class ids


def class_color(cls_id: int) -> np.ndarray:
    """Fixed, well-separated signature color for a foreground class."""
    hue = (cls_id * 0.6180339887498949) % 1.0  # golden-ratio spacing
    sat, val = 0.85, 0.9
    i = int(hue * 6.0) % 6
    f = hue * 6.0 - int(hue * 6.0)
    p, q, t = val * (1 - sat), val * (1 - sat * f), val * (1 - sat * (1 - f))
    rgb = [(val, t, p), (q, val, p), (p, val, t),
           (p, q, val), (t, p, val), (val, p, q)][i]
    return np.array(rgb)


def _bbox_overlaps(box, boxes, gap=1):
    y0, x0, y1, x1 = box
    for oy0, ox0, oy1, ox1 in boxes:
        if y0 < oy1 + gap and oy0 < y1 + gap and x0 < ox1 + gap and ox0 < x1 + gap:
            return True
    return False


def gen_toy_sample(rng: Rng, h: int, w: int, c_cls: int) -> ToySample:
    if c_cls < 2:
        raise ValueError("need at least 2 classes (background + 1 shape)")
    if h % 64 or w % 64:
        raise ValueError("sample sides must be multiples of 64")

    img = rng.uniform((3, h, w))  # noise background
    mask = np.zeros((h, w), dtype=np.int64)

    max_shapes = min(3, c_cls - 1)
    n_shapes = 1 + int(rng.next_u64() % max_shapes)
    class_ids = list(range(1, c_cls))
    for i in range(len(class_ids) - 1, 0, -1):  # seeded in-place shuffle
        j = int(rng.next_u64() % (i + 1))
        class_ids[i], class_ids[j] = class_ids[j], class_ids[i]
    class_ids = class_ids[:n_shapes]

    placed: list[tuple[int, int, int, int]] = []
    for cls_id in class_ids:
        is_rect = bool(rng.next_u64() % 2)
        lo, hi = _RECT_FRAC if is_rect else _ELLIPSE_FRAC
        for _ in range(_MAX_TRIES):
            frac = float(rng.uniform(1, lo, hi)[0])
            aspect = float(rng.uniform(1, 0.5, 2.0)[0])
            bh = int(round(np.sqrt(frac / aspect) * h))
            bw = int(round(np.sqrt(frac * aspect) * w))
            bh, bw = max(bh, 4), max(bw, 4)
            if bh >= h or bw >= w:
                continue
            y0 = int(rng.next_u64() % (h - bh))
            x0 = int(rng.next_u64() % (w - bw))
            box = (y0, x0, y0 + bh, x0 + bw)
            if _bbox_overlaps(box, placed):
                continue
            placed.append(box)
            ys, xs = np.mgrid[0:bh, 0:bw]
            if is_rect:
                inside = np.ones((bh, bw), dtype=bool)
            else:
                cy, cx = (bh - 1) / 2.0, (bw - 1) / 2.0
                inside = (((ys - cy) / (bh / 2.0)) ** 2
                          + ((xs - cx) / (bw / 2.0)) ** 2) <= 1.0
            color = class_color(cls_id)
            noise = rng.uniform((3, bh, bw), -_COLOR_NOISE, _COLOR_NOISE)
            patch = np.clip(color[:, None, None] + noise, 0.0, 1.0)
            region = img[:, y0:y0 + bh, x0:x0 + bw]
            region[:, inside] = patch[:, inside]
            mask[y0:y0 + bh, x0:x0 + bw][inside] = cls_id
            break

    return ToySample(image=Tensor(img[None]), mask=mask)
