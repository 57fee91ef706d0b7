"""Shared constants: the fixed four-class vocabulary and box helpers."""

from __future__ import annotations

CLASSES = ("table", "pie", "bar", "line")
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}


def box_area(box):
    return box[2] * box[3]


def box_iou(a, b):
    """Intersection over union of two (x, y, w, h) boxes; 0 when both empty."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(ax, bx)
    iy = max(ay, by)
    ix2 = min(ax + aw, bx + bw)
    iy2 = min(ay + ah, by + bh)
    inter = max(0, ix2 - ix) * max(0, iy2 - iy)
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return inter / union


def clip_box(box, width, height):
    x, y, w, h = box
    x = max(0, min(x, width - 1))
    y = max(0, min(y, height - 1))
    w = max(1, min(w, width - x))
    h = max(1, min(h, height - y))
    return (x, y, w, h)
