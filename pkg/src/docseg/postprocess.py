"""From heatmaps to detections: thresholding, connected components and
tight bounding boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .common import CLASSES

EIGHT_CONN = np.ones((3, 3), dtype=int)


@dataclass
class Component:
    """One 8-connected foreground region.

    ``mask`` is the boolean region cropped to its bounding box; ``box`` is
    the tight (x, y, w, h) hull in full-image coordinates.
    """

    box: tuple
    mask: np.ndarray
    area: int

    def pixel_set(self):
        ys, xs = np.nonzero(self.mask)
        return set(zip((ys + self.box[1]).tolist(), (xs + self.box[0]).tolist()))


@dataclass
class Detection:
    class_id: int
    box: tuple  # (x, y, w, h)
    mask: np.ndarray  # boolean, cropped to box
    score: float

    @property
    def class_name(self):
        return CLASSES[self.class_id]


def binarize(prob_map, threshold=0.5):
    """Pixel is foreground iff its value >= threshold (threshold in (0,1))."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    arr = np.asarray(prob_map)
    return (arr >= threshold).astype(np.uint8)


def connected_components(mask):
    """8-connected components of a binary mask, ordered by (top, left).

    The components partition the foreground exactly; each one carries its
    tight bounding box.
    """
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {arr.shape}")
    labelled, count = ndimage.label(arr != 0, structure=EIGHT_CONN)
    comps = []
    for label, sl in enumerate(ndimage.find_objects(labelled), start=1):
        if sl is None:
            continue
        ys, xs = sl
        sub = labelled[sl] == label  # the box may also contain other components
        comps.append(
            Component(
                box=(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start),
                mask=sub,
                area=int(sub.sum()),
            )
        )
    comps.sort(key=lambda c: (c.box[1], c.box[0]))
    return comps


def detections_from_masks(masks, stack, min_area=None):
    """Turn per-class binary masks into scored detections.

    ``masks`` is [N,H,W] {0,1}; ``stack`` supplies the saliency values the
    scores average over.  Components below ``min_area`` (default 0.1% of
    the image) are dropped.
    """
    masks = np.asarray(masks)
    maps = stack.maps if hasattr(stack, "maps") else np.asarray(stack)
    if masks.shape != maps.shape:
        raise ValueError(f"masks {masks.shape} and saliency {maps.shape} are misaligned")
    h, w = masks.shape[1:]
    if min_area is None:
        min_area = max(1, int(0.001 * h * w))
    dets = []
    for class_id in range(masks.shape[0]):
        for comp in connected_components(masks[class_id]):
            if comp.area < min_area:
                continue
            x, y, bw, bh = comp.box
            region = maps[class_id, y : y + bh, x : x + bw]
            score = float(region[comp.mask].mean())
            dets.append(Detection(class_id=class_id, box=comp.box, mask=comp.mask, score=score))
    return dets
