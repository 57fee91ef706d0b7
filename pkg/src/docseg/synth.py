"""Synthetic document-page generator.

Renders square pages containing tables (ruled or unruled), pie charts,
bar charts and line charts among text-like distractor strokes, together
with exact per-class ground-truth masks and tight annotation boxes.
Object interiors use pale class tints and all palette colours are well
separated, which keeps pages realistic for the appearance-kernel CRF and
makes the desk-scale detection task learnable in minutes.

Pages are deterministic functions of the spec seed: the same spec yields
byte-identical images, masks and annotations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image, ImageDraw

from .common import CLASSES

log = logging.getLogger(__name__)

PAGE_COLOR = (255, 255, 255)
INK = (25, 25, 28)

# interior tints per class, all >= 20 units away from page white and from
# each other so the CRF colour kernel separates them cleanly
TINTS = {
    "table": [(222, 233, 248), (231, 238, 252)],
    "bar": [(250, 240, 210), (252, 246, 224)],
    "line": [(222, 244, 226), (232, 248, 234)],
}

SERIES_COLORS = [
    (198, 64, 58),
    (58, 112, 196),
    (226, 166, 46),
    (84, 164, 88),
    (148, 88, 176),
    (52, 160, 164),
]


@dataclass(frozen=True)
class PageSpec:
    """Recipe for one synthetic page (or a family of them via the seed)."""

    seed: int = 0
    size: int = 128
    count_ranges: dict = field(
        default_factory=lambda: {c: (0, 1) for c in CLASSES}
    )  # inclusive (lo, hi) objects per class
    text_rows: tuple = (6, 14)
    ruled_prob: float = 0.5
    object_fraction: tuple = (0.24, 0.42)  # object side as a fraction of the page
    noise_sigma: float = 0.0
    max_place_tries: int = 60


@dataclass(frozen=True)
class Annotation:
    image_id: str
    cls: str
    box: tuple  # (x, y, w, h)


def _boxes_overlap(a, b, gap=2):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return not (
        ax + aw + gap <= bx or bx + bw + gap <= ax or ay + ah + gap <= by or by + bh + gap <= ay
    )


def _place_objects(rng, spec):
    """Sample per-class counts and non-overlapping boxes; drops objects
    that will not place within the retry budget (logged)."""
    wanted = []
    for cls in CLASSES:
        lo, hi = spec.count_ranges.get(cls, (0, 0))
        for _ in range(int(rng.integers(lo, hi + 1))):
            wanted.append(cls)
    order = rng.permutation(len(wanted))

    s = spec.size
    lo_f, hi_f = spec.object_fraction
    placed = []
    for idx in order:
        cls = wanted[idx]
        done = False
        for attempt in range(spec.max_place_tries):
            shrink = 1.0 - 0.3 * attempt / spec.max_place_tries
            w = int(rng.uniform(lo_f, hi_f) * s * shrink)
            h = int(rng.uniform(lo_f, hi_f) * s * shrink)
            w, h = max(w, 14), max(h, 14)
            if cls == "pie":
                w = h = min(w, h)  # discs get square boxes
            x = int(rng.integers(2, max(3, s - w - 2)))
            y = int(rng.integers(2, max(3, s - h - 2)))
            box = (x, y, w, h)
            if all(not _boxes_overlap(box, p[1]) for p in placed):
                placed.append((cls, box))
                done = True
                break
        if not done:
            log.info("page seed %s: dropped one %s object (no room)", spec.seed, cls)
    return placed


def _text_strokes(draw, rng, box, color=INK, gap=3):
    """Word-like stroke row inside ``box``: short dark rects with gaps."""
    x, y, w, h = box
    cx = x
    while cx < x + w - 3:
        word = int(rng.integers(3, 9))
        word = min(word, x + w - cx)
        draw.rectangle([cx, y, cx + word - 1, y + h - 1], fill=color)
        cx += word + gap + int(rng.integers(0, 3))


def _render_table(draw, rng, box, ruled):
    x, y, w, h = box
    tint = TINTS["table"][int(rng.integers(len(TINTS["table"])))]
    draw.rectangle([x, y, x + w - 1, y + h - 1], fill=tint)
    rows = int(rng.integers(3, 6))
    cols = int(rng.integers(2, 5))
    if ruled:
        draw.rectangle([x, y, x + w - 1, y + h - 1], outline=INK)
        for r in range(1, rows):
            yy = y + r * h // rows
            draw.line([x, yy, x + w - 1, yy], fill=INK)
        for c in range(1, cols):
            xx = x + c * w // cols
            draw.line([xx, y, xx, y + h - 1], fill=INK)
    else:
        draw.line([x, y + h // rows, x + w - 1, y + h // rows], fill=INK)  # header rule only
    for r in range(rows):
        for c in range(cols):
            if rng.random() < 0.75:
                cw = w // cols
                ch = h // rows
                tx = x + c * cw + 2
                ty = y + r * ch + max(1, ch // 2 - 1)
                tw = max(3, cw - 5)
                if tx + tw < x + w and ty + 1 < y + h:
                    _text_strokes(draw, rng, (tx, ty, tw, min(2, ch - 2)), gap=2)


def _render_pie(draw, rng, box):
    x, y, w, h = box
    r = min(w, h) // 2
    cx, cy = x + w // 2, y + h // 2
    bbox = [cx - r, cy - r, cx + r, cy + r]
    colors = [SERIES_COLORS[i % len(SERIES_COLORS)] for i in rng.permutation(len(SERIES_COLORS))]
    draw.ellipse(bbox, fill=colors[0])
    wedges = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 360, size=wedges))
    for i in range(wedges - 1):
        draw.pieslice(bbox, float(angles[i]), float(angles[i + 1]), fill=colors[(i + 1) % len(colors)])
    draw.ellipse(bbox, outline=INK)
    return bbox


def _render_bar(draw, rng, box):
    x, y, w, h = box
    tint = TINTS["bar"][int(rng.integers(len(TINTS["bar"])))]
    draw.rectangle([x, y, x + w - 1, y + h - 1], fill=tint)
    draw.line([x + 1, y, x + 1, y + h - 1], fill=INK)  # y axis
    draw.line([x + 1, y + h - 1, x + w - 1, y + h - 1], fill=INK)  # x axis
    bars = int(rng.integers(3, 7))
    slot = max(3, (w - 4) // bars)
    bw = max(2, slot - 2)
    color = SERIES_COLORS[int(rng.integers(len(SERIES_COLORS)))]
    for b in range(bars):
        bh = int(rng.uniform(0.25, 0.92) * (h - 4))
        bx = x + 3 + b * slot
        if bx + bw >= x + w:
            break
        draw.rectangle([bx, y + h - 2 - bh, bx + bw - 1, y + h - 2], fill=color)


def _render_line(draw, rng, box):
    x, y, w, h = box
    tint = TINTS["line"][int(rng.integers(len(TINTS["line"])))]
    draw.rectangle([x, y, x + w - 1, y + h - 1], fill=tint)
    draw.line([x + 1, y, x + 1, y + h - 1], fill=INK)
    draw.line([x + 1, y + h - 1, x + w - 1, y + h - 1], fill=INK)
    for series in range(int(rng.integers(1, 3))):
        color = SERIES_COLORS[int(rng.integers(len(SERIES_COLORS)))]
        points = int(rng.integers(5, 9))
        xs = np.linspace(x + 3, x + w - 3, points)
        ys = y + 3 + rng.uniform(0, 1, size=points) * (h - 7)
        path = [(float(a), float(b)) for a, b in zip(xs, ys)]
        draw.line(path, fill=color, width=1)
        for px, py in path:
            draw.rectangle([px - 1, py - 1, px + 1, py + 1], fill=color)


def generate_page(spec: PageSpec, image_id="page"):
    """Render one page.

    Returns ``(image, masks, annotations)``: an [H,W,3] uint8 RGB image,
    an [4,H,W] uint8 {0,1} ground-truth stack in class order, and the
    tight-box annotations derived from the rendered mask extents.
    """
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    img = Image.new("RGB", (s, s), PAGE_COLOR)
    draw = ImageDraw.Draw(img)
    masks = np.zeros((len(CLASSES), s, s), dtype=np.uint8)
    annotations = []

    placed = _place_objects(rng, spec)
    for cls, box in placed:
        mask_img = Image.new("L", (s, s), 0)
        mask_draw = ImageDraw.Draw(mask_img)
        if cls == "table":
            _render_table(draw, rng, box, ruled=bool(rng.random() < spec.ruled_prob))
            mask_draw.rectangle([box[0], box[1], box[0] + box[2] - 1, box[1] + box[3] - 1], fill=1)
        elif cls == "pie":
            bbox = _render_pie(draw, rng, box)
            mask_draw.ellipse(bbox, fill=1)
        elif cls == "bar":
            _render_bar(draw, rng, box)
            mask_draw.rectangle([box[0], box[1], box[0] + box[2] - 1, box[1] + box[3] - 1], fill=1)
        else:
            _render_line(draw, rng, box)
            mask_draw.rectangle([box[0], box[1], box[0] + box[2] - 1, box[1] + box[3] - 1], fill=1)
        obj_mask = np.asarray(mask_img)
        ys, xs = np.nonzero(obj_mask)
        tight = (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
        annotations.append(Annotation(image_id=image_id, cls=cls, box=tight))
        masks[CLASSES.index(cls)] |= obj_mask

    # distractor text rows in the free space
    occupied = [box for _, box in placed]
    n_rows = int(rng.integers(spec.text_rows[0], spec.text_rows[1] + 1))
    for _ in range(n_rows):
        for _ in range(20):
            w = int(rng.uniform(0.2, 0.6) * s)
            y = int(rng.integers(2, s - 4))
            x = int(rng.integers(2, max(3, s - w - 2)))
            row = (x, y, w, 2)
            if all(not _boxes_overlap(row, b, gap=2) for b in occupied):
                _text_strokes(draw, rng, row)
                break

    arr = np.asarray(img, dtype=np.uint8)
    if spec.noise_sigma > 0:
        noisy = arr.astype(np.float64) + rng.normal(0.0, spec.noise_sigma, size=arr.shape)
        arr = np.clip(np.round(noisy), 0, 255).astype(np.uint8)
    return arr, masks, annotations
