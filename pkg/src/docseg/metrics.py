"""Detection evaluation: IOU, thresholded one-to-one matching, precision /
recall / F1 and the per-class + average report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .common import CLASSES, box_iou


def iou(a, b):
    """Intersection over union of two masks or two boxes.

    Masks are 2-d arrays compared per-pixel; boxes are (x, y, w, h)
    tuples.  Mixing the two kinds is rejected; empty-vs-empty is 0.
    """
    a_is_mask = isinstance(a, np.ndarray) and getattr(a, "ndim", 0) == 2
    b_is_mask = isinstance(b, np.ndarray) and getattr(b, "ndim", 0) == 2
    if a_is_mask != b_is_mask:
        raise TypeError("iou operands must both be masks or both be boxes")
    if a_is_mask:
        if a.shape != b.shape:
            raise ValueError(f"mask resolutions differ: {a.shape} vs {b.shape}")
        am = a != 0
        bm = b != 0
        union = np.logical_or(am, bm).sum()
        if union == 0:
            return 0.0
        return float(np.logical_and(am, bm).sum() / union)
    return box_iou(tuple(a), tuple(b))


@dataclass
class MatchResult:
    """Per-class match counts for one or more images."""

    tp: dict = field(default_factory=lambda: {c: 0 for c in CLASSES})
    fp: dict = field(default_factory=lambda: {c: 0 for c in CLASSES})
    fn: dict = field(default_factory=lambda: {c: 0 for c in CLASSES})
    matches: list = field(default_factory=list)  # (det, annotation, iou)

    def merge(self, other):
        for c in CLASSES:
            self.tp[c] += other.tp[c]
            self.fp[c] += other.fp[c]
            self.fn[c] += other.fn[c]
        self.matches.extend(other.matches)


def match_detections(detections, annotations, iou_threshold=0.5):
    """Greedy one-to-one, same-class matching by descending IOU.

    ``detections`` carry ``class_name``/``class_id`` and ``box``;
    ``annotations`` carry ``cls`` and ``box``.  Pairs with IOU below the
    threshold never match; leftovers count as FP (detections) and FN
    (annotations).  Ties break on (detection index, annotation index) so
    input order never changes the counts.
    """
    result = MatchResult()
    for cls in CLASSES:
        dets = [d for d in detections if d.class_name == cls]
        anns = [a for a in annotations if a.cls == cls]
        pairs = []
        for di, d in enumerate(dets):
            for ai, a in enumerate(anns):
                overlap = box_iou(d.box, a.box)
                if overlap >= iou_threshold:
                    pairs.append((-overlap, di, ai))
        pairs.sort()
        used_d, used_a = set(), set()
        for neg, di, ai in pairs:
            if di in used_d or ai in used_a:
                continue
            used_d.add(di)
            used_a.add(ai)
            result.matches.append((dets[di], anns[ai], -neg))
        result.tp[cls] += len(used_d)
        result.fp[cls] += len(dets) - len(used_d)
        result.fn[cls] += len(anns) - len(used_a)
    return result


def f1_score(precision, recall):
    """Harmonic mean; scale-free, so fractions and percentages both work."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def prf1(tp, fp, fn):
    """Precision, recall and F1 as fractions; 0/0 cases resolve to 0."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    pr = tp / (tp + fp) if tp + fp else 0.0
    re = tp / (tp + fn) if tp + fn else 0.0
    return pr, re, f1_score(pr, re)


@dataclass
class ClassMetrics:
    precision: float  # percent
    recall: float
    f1: float
    mean_iou: float


@dataclass
class EvalReport:
    """Per-class and average percentages plus the raw counts behind them."""

    per_class: dict  # class name -> ClassMetrics
    average: ClassMetrics
    counts: MatchResult

    def row(self, cls):
        return self.average if cls == "average" else self.per_class[cls]


def evaluate(samples, iou_threshold=0.5):
    """Aggregate detection metrics over a dataset.

    ``samples`` is an iterable of (detections, annotations, gt_masks)
    where ``gt_masks`` is an optional [N,H,W] binary stack used for
    segmentation IOU of matched pairs (falls back to box IOU when absent
    or when a detection has no mask).  Counts aggregate over all images
    per class before precision/recall; mean IOU averages over every
    ground-truth object with unmatched objects contributing zero; the
    average row is the unweighted mean over the four classes.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("evaluate needs a non-empty dataset")

    totals = MatchResult()
    iou_sums = {c: 0.0 for c in CLASSES}
    gt_counts = {c: 0 for c in CLASSES}

    for dets, anns, gt_masks in samples:
        res = match_detections(dets, anns, iou_threshold=iou_threshold)
        for det, ann, overlap in res.matches:
            seg = overlap
            if gt_masks is not None and getattr(det, "mask", None) is not None:
                seg = _segmentation_iou(det, ann, gt_masks)
            iou_sums[ann.cls] += seg
        for ann in anns:
            gt_counts[ann.cls] += 1
        totals.merge(res)

    per_class = {}
    for cls in CLASSES:
        pr, re, f1 = prf1(totals.tp[cls], totals.fp[cls], totals.fn[cls])
        miou = iou_sums[cls] / gt_counts[cls] if gt_counts[cls] else 0.0
        per_class[cls] = ClassMetrics(100.0 * pr, 100.0 * re, 100.0 * f1, 100.0 * miou)
    avg = ClassMetrics(
        float(np.mean([per_class[c].precision for c in CLASSES])),
        float(np.mean([per_class[c].recall for c in CLASSES])),
        float(np.mean([per_class[c].f1 for c in CLASSES])),
        float(np.mean([per_class[c].mean_iou for c in CLASSES])),
    )
    return EvalReport(per_class=per_class, average=avg, counts=totals)


def _segmentation_iou(det, ann, gt_masks):
    """Mask IOU between a detection's component and one annotated object.

    The object's mask is the class mask restricted to the annotation box
    (objects never overlap, so the restriction is exact).
    """
    from .common import CLASS_INDEX

    class_mask = np.asarray(gt_masks[CLASS_INDEX[ann.cls]])
    h, w = class_mask.shape
    gt_full = np.zeros((h, w), dtype=bool)
    ax, ay, aw, ah = ann.box
    gt_full[ay : ay + ah, ax : ax + aw] = class_mask[ay : ay + ah, ax : ax + aw] != 0
    det_full = np.zeros((h, w), dtype=bool)
    dx, dy, dw, dh = det.box
    det_full[dy : dy + dh, dx : dx + dw] = det.mask
    return iou(det_full, gt_full)
