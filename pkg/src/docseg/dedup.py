"""HOG descriptors and k-nearest-neighbour near-duplicate detection
between a training set and a test set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

HOG_CELL = 8
HOG_BINS = 9
HOG_BLOCK = 2
DEDUP_IMAGE_SIZE = 128

# Distance at or below which a train/test pair counts as a duplicate.
# Exact copies land at distance 0; nearest neighbours between disjoint
# synthetic sets sit far above 1 (see the dedup tests), so a small
# absolute default separates the two regimes cleanly.
DUPLICATE_DISTANCE_DEFAULT = 0.5


def _to_gray(image):
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114
    return arr.astype(np.float64)


def hog_features(image, cell=HOG_CELL, bins=HOG_BINS, block=HOG_BLOCK):
    """Histogram-of-oriented-gradients descriptor.

    Unsigned orientations in 9 bins over 8x8-pixel cells, 2x2-cell blocks
    with L2-Hys normalisation, flattened.  Images smaller than one block
    are rejected.
    """
    gray = _to_gray(image)
    h, w = gray.shape
    if h < cell * block or w < cell * block:
        raise ValueError(f"image {h}x{w} smaller than one {cell * block}px block")

    gy = np.zeros_like(gray)
    gx = np.zeros_like(gray)
    gy[1:-1] = gray[2:] - gray[:-2]
    gx[:, 1:-1] = gray[:, 2:] - gray[:, :-2]
    mag = np.hypot(gx, gy)
    ang = np.rad2deg(np.arctan2(gy, gx)) % 180.0

    cy, cx = h // cell, w // cell
    mag = mag[: cy * cell, : cx * cell]
    ang = ang[: cy * cell, : cx * cell]

    # linear interpolation between the two nearest orientation bins
    pos = ang / (180.0 / bins) - 0.5
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    lo %= bins
    hi = (lo + 1) % bins

    hist = np.zeros((cy, cx, bins))
    cell_rows = mag.reshape(cy, cell, cx, cell)
    for b in range(bins):
        weight = mag * (((lo == b) * (1.0 - frac)) + ((hi == b) * frac))
        hist[:, :, b] = weight.reshape(cy, cell, cx, cell).sum(axis=(1, 3))

    by, bx = cy - block + 1, cx - block + 1
    out = np.zeros((by, bx, block * block * bins))
    for i in range(by):
        for j in range(bx):
            v = hist[i : i + block, j : j + block].ravel()
            norm = np.sqrt((v * v).sum() + 1e-10)
            v = v / norm
            v = np.minimum(v, 0.2)  # hysteresis clip then renormalise
            norm = np.sqrt((v * v).sum() + 1e-10)
            out[i, j] = v / norm
    return out.ravel()


def dedup_descriptor(image):
    """Fixed-length page descriptor: resize to 128x128 then HOG."""
    arr = np.asarray(image, dtype=np.uint8)
    im = Image.fromarray(arr).convert("L").resize(
        (DEDUP_IMAGE_SIZE, DEDUP_IMAGE_SIZE), Image.BILINEAR
    )
    return hog_features(np.asarray(im))


@dataclass(frozen=True)
class DuplicateFlag:
    train_id: str
    test_id: str
    distance: float


def dedup(train_features, test_features, k=10, threshold=DUPLICATE_DISTANCE_DEFAULT):
    """Flag training images that near-duplicate test images.

    ``train_features``/``test_features`` map ids to equal-length HOG
    vectors.  For each test image the k nearest training images by
    Euclidean distance are candidates; candidates at distance <= threshold
    are flagged for removal.  Returns flags sorted by (distance, ids).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not train_features or not test_features:
        raise ValueError("dedup needs non-empty train and test sets")

    train_ids = sorted(train_features)
    test_ids = sorted(test_features)
    train_mat = np.stack([np.asarray(train_features[i], dtype=np.float64) for i in train_ids])
    test_mat = np.stack([np.asarray(test_features[i], dtype=np.float64) for i in test_ids])
    if train_mat.shape[1] != test_mat.shape[1]:
        raise ValueError(
            f"descriptor lengths differ: train {train_mat.shape[1]} vs test {test_mat.shape[1]}"
        )

    flags = []
    kk = min(k, len(train_ids))
    for ti, tid in enumerate(test_ids):
        d2 = ((train_mat - test_mat[ti]) ** 2).sum(axis=1)
        nearest = np.argsort(d2, kind="stable")[:kk]
        for ni in nearest:
            dist = float(np.sqrt(d2[ni]))
            if dist <= threshold:
                flags.append(DuplicateFlag(train_id=train_ids[ni], test_id=tid, distance=dist))
    flags.sort(key=lambda f: (f.distance, f.train_id, f.test_id))
    return flags


def nearest_distance_percentile(train_features, test_features, pct=5.0):
    """Calibration helper: percentile of each test image's nearest-train
    distance; useful for picking a dataset-specific duplicate threshold."""
    train_ids = sorted(train_features)
    test_ids = sorted(test_features)
    train_mat = np.stack([np.asarray(train_features[i], dtype=np.float64) for i in train_ids])
    dists = []
    for tid in test_ids:
        d2 = ((train_mat - np.asarray(test_features[tid], dtype=np.float64)) ** 2).sum(axis=1)
        dists.append(np.sqrt(d2.min()))
    return float(np.percentile(dists, pct))
