"""Dataset directory layout and ground-truth IO.

A dataset directory looks like::

    images/<id>.png            RGB pages
    masks/<class>/<id>.png     8-bit {0,255} ground-truth masks per class
    manifest.tsv               one record per object: image, class, x, y, w, h

The same manifest/mask format serves both synthetic data and externally
annotated pages.
"""

from __future__ import annotations

import os
from dataclasses import replace

import numpy as np
from PIL import Image

from .common import CLASSES
from .synth import Annotation, PageSpec, generate_page


class GroundTruthError(IOError):
    """Missing or malformed ground-truth files."""


def save_image(path, array):
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


def load_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_masks(dataset_dir, image_id, masks):
    """Write the [4,H,W] {0,1} stack as per-class {0,255} PNGs; empty
    channels are still written so absence stays explicit."""
    masks = np.asarray(masks)
    for idx, cls in enumerate(CLASSES):
        class_dir = os.path.join(dataset_dir, "masks", cls)
        os.makedirs(class_dir, exist_ok=True)
        out = (masks[idx] != 0).astype(np.uint8) * 255
        Image.fromarray(out, mode="L").save(os.path.join(class_dir, f"{image_id}.png"))


def load_masks(dataset_dir, image_id):
    """Read the per-class masks back as a [4,H,W] {0,1} stack."""
    stack = []
    for cls in CLASSES:
        path = os.path.join(dataset_dir, "masks", cls, f"{image_id}.png")
        if not os.path.exists(path):
            raise GroundTruthError(f"missing {cls!r} mask for image {image_id!r}: {path}")
        with Image.open(path) as im:
            stack.append((np.asarray(im.convert("L")) >= 128).astype(np.uint8))
    shapes = {m.shape for m in stack}
    if len(shapes) != 1:
        raise GroundTruthError(f"mask resolutions disagree for image {image_id!r}: {shapes}")
    return np.stack(stack)


MANIFEST_HEADER = "image\tclass\tx\ty\tw\th"


def save_manifest(path, annotations):
    with open(path, "w") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for ann in annotations:
            x, y, w, h = ann.box
            fh.write(f"{ann.image_id}\t{ann.cls}\t{x}\t{y}\t{w}\t{h}\n")


def load_manifest(path):
    """Parse a manifest into ``{image_id: [Annotation, ...]}`` (images with
    zero objects simply do not appear)."""
    if not os.path.exists(path):
        raise GroundTruthError(f"manifest not found: {path}")
    by_image = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != MANIFEST_HEADER:
            raise GroundTruthError(f"unexpected manifest header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise GroundTruthError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            image_id, cls, x, y, w, h = parts
            if cls not in CLASSES:
                raise GroundTruthError(f"{path}:{lineno}: unknown class {cls!r}")
            by_image.setdefault(image_id, []).append(
                Annotation(image_id=image_id, cls=cls, box=(int(x), int(y), int(w), int(h)))
            )
    return by_image


def list_image_ids(dataset_dir):
    image_dir = os.path.join(dataset_dir, "images")
    if not os.path.isdir(image_dir):
        raise GroundTruthError(f"no images/ directory under {dataset_dir}")
    return sorted(os.path.splitext(name)[0] for name in os.listdir(image_dir) if name.endswith(".png"))


def generate_dataset(base_spec: PageSpec, count, out_dir):
    """Render ``count`` pages (seeds base_seed..base_seed+count-1) into the
    dataset layout; returns per-class annotation totals."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    all_annotations = []
    class_totals = {c: 0 for c in CLASSES}
    for i in range(count):
        image_id = f"page{i:05d}"
        spec = replace(base_spec, seed=base_spec.seed + i)
        image, masks, annotations = generate_page(spec, image_id=image_id)
        save_image(os.path.join(out_dir, "images", f"{image_id}.png"), image)
        save_masks(out_dir, image_id, masks)
        all_annotations.extend(annotations)
        for ann in annotations:
            class_totals[ann.cls] += 1
    save_manifest(os.path.join(out_dir, "manifest.tsv"), all_annotations)
    return class_totals


def load_dataset(dataset_dir):
    """Yield (image_id, image, masks, annotations) for every page."""
    manifest = load_manifest(os.path.join(dataset_dir, "manifest.tsv"))
    for image_id in list_image_ids(dataset_dir):
        image = load_image(os.path.join(dataset_dir, "images", f"{image_id}.png"))
        masks = load_masks(dataset_dir, image_id)
        yield image_id, image, masks, manifest.get(image_id, [])
