"""Fully-connected CRF refinement of per-class saliency maps.

Each class map is refined independently over the binary label space
{background, object}.  Unaries are negative log saliency probabilities;
the pairwise potential couples every pixel pair through two Gaussian
kernels (an appearance kernel over position+colour and a smoothness
kernel over position) gated by Potts compatibility.  Inference is
mean-field with synchronous updates:

    Q_i(l) ∝ exp(-theta_i(l) - sum_{l' != l} sum_{j != i} k(i,j) Q_j(l'))

Two execution modes share this update: ``exact`` materialises the full
N x N kernel (the correctness oracle, fine up to ~32x32 images), and
``fast`` approximates the kernel sums with a downsampled bilateral grid
(coarse spatial lattice x quantised colour cells) plus a truncated
separable convolution for the smoothness kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

BACKGROUND = 0
OBJECT = 1

_CLAMP = 1e-6


@dataclass(frozen=True)
class CrfParams:
    """Pairwise weights/widths and the mean-field iteration count.

    Defaults (5, 3, 50, 3, 3) are the reference operating point; sigma
    values are in pixels for the spatial terms and 0-255 colour units for
    the appearance term.
    """

    w1: float = 5.0
    w2: float = 3.0
    sigma_alpha: float = 50.0
    sigma_beta: float = 3.0
    sigma_gamma: float = 3.0
    iterations: int = 10

    def __post_init__(self):
        for name in ("sigma_alpha", "sigma_beta", "sigma_gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"CrfParams.{name} must be positive")
        if self.iterations < 1:
            raise ValueError("CrfParams.iterations must be a positive integer")


@dataclass(frozen=True)
class PixelFeature:
    """Spatial coordinates (pixels) and RGB colour (0-255) of one pixel."""

    s: tuple
    c: tuple


def pairwise_weight(fi: PixelFeature, fj: PixelFeature, params: CrfParams):
    """Gaussian pairwise kernel k(i, j); symmetric by construction."""
    ds = float(np.sum((np.asarray(fi.s, float) - np.asarray(fj.s, float)) ** 2))
    dc = float(np.sum((np.asarray(fi.c, float) - np.asarray(fj.c, float)) ** 2))
    appearance = math.exp(-ds / (2.0 * params.sigma_alpha**2) - dc / (2.0 * params.sigma_beta**2))
    smoothness = math.exp(-ds / (2.0 * params.sigma_gamma**2))
    return params.w1 * appearance + params.w2 * smoothness


def unary_from_saliency(prob_map):
    """Negative-log unary costs [H,W,2] from a [0,1] saliency map.

    Channel OBJECT carries -log p, channel BACKGROUND -log(1-p); the
    probability is clamped to [1e-6, 1-1e-6] first.
    """
    p = np.asarray(prob_map, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"saliency map must be [H,W], got {p.shape}")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("saliency values must lie in [0,1]")
    pc = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    theta = np.empty(p.shape + (2,), dtype=np.float64)
    theta[..., OBJECT] = -np.log(pc)
    theta[..., BACKGROUND] = -np.log(1.0 - pc)
    return theta


def _features(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be [H,W,3] RGB, got {img.shape}")
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    pos = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    col = img.reshape(-1, 3)
    return pos, col


def kernel_matrix(image, params: CrfParams):
    """Dense [N,N] pairwise kernel with zero diagonal (exact path)."""
    pos, col = _features(image)
    d_s = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    d_c = ((col[:, None, :] - col[None, :, :]) ** 2).sum(-1)
    k = params.w1 * np.exp(
        -d_s / (2.0 * params.sigma_alpha**2) - d_c / (2.0 * params.sigma_beta**2)
    ) + params.w2 * np.exp(-d_s / (2.0 * params.sigma_gamma**2))
    np.fill_diagonal(k, 0.0)
    return k


def energy(labels, unary, image, params: CrfParams):
    """CRF energy of a full labelling: unary sum plus the Potts-gated
    pairwise kernel counted once per unordered pair."""
    lab = np.asarray(labels).ravel().astype(int)
    theta = np.asarray(unary)
    h, w = theta.shape[:2]
    if lab.size != h * w:
        raise ValueError(f"labelling has {lab.size} entries for a {h}x{w} unary field")
    k = kernel_matrix(image, params)
    differ = lab[:, None] != lab[None, :]
    unary_term = theta.reshape(-1, 2)[np.arange(lab.size), lab].sum()
    return float(unary_term + 0.5 * (k * differ).sum())


def map_by_enumeration(unary, image, params: CrfParams):
    """Exhaustive minimum-energy labelling; only viable for tiny images."""
    theta = np.asarray(unary)
    n = theta.shape[0] * theta.shape[1]
    if n > 16:
        raise ValueError(f"enumeration over 2^{n} labellings is not feasible")
    best, best_e = None, np.inf
    for code in range(2**n):
        lab = np.array([(code >> i) & 1 for i in range(n)])
        e = energy(lab, unary, image, params)
        if e < best_e:
            best, best_e = lab, e
    return best.reshape(theta.shape[:2]), best_e


# -- message passing -------------------------------------------------------


def _softmax_neg(logits):
    """Row-normalised exp(-logits) over the last axis, overflow-safe."""
    z = -logits
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _spatial_sum(field, sigma):
    """Unnormalised truncated Gaussian sum over the two leading axes.

    Zero boundary handling matches the exact sum, which only ranges over
    existing pixels; truncation at 5 sigma loses < 4e-6 of kernel mass.
    """
    radius = max(1, int(math.ceil(5.0 * sigma)))
    u = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-(u**2) / (2.0 * sigma**2))
    out = correlate1d(field, kern, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, kern, axis=1, mode="constant", cval=0.0)


class _BilateralGrid:
    """Sparse bilateral grid for the appearance kernel.

    Colour cells are the page's unique colours when few (palette pages get
    exact colour handling), otherwise a lattice of width ~sigma_beta/4
    coarsened until it fits the cell budget.  Each occupied colour cell
    owns a spatial grid sampled at sigma_alpha/8 (never finer than one
    pixel, where the lattice sums become exact).  Filtering = bilinear
    splat -> per-cell spatial Gaussian blur -> colour mixing between cell
    mean colours -> bilinear slice.  The spatial blur sigma is shrunk to
    compensate the variance the splat/slice hats add.
    """

    def __init__(self, image, sigma_s, sigma_r, spatial_ratio=8.0, max_color_cells=512):
        img = np.asarray(image, dtype=np.float64)
        h, w = img.shape[:2]
        self.shape = (h, w)

        flat = img.reshape(-1, 3)
        # palette pages resolve to exact unique colours; rich images fall
        # back to a colour lattice that coarsens until it fits the budget
        cells, inverse = np.unique(flat, axis=0, return_inverse=True)
        if len(cells) > max_color_cells:
            tau_r = max(1.0, sigma_r / 4.0)
            while True:
                keys = np.floor(flat / tau_r).astype(np.int64)
                cells, inverse = np.unique(keys, axis=0, return_inverse=True)
                if len(cells) <= max_color_cells:
                    break
                tau_r *= 2.0
        self.group = inverse
        self.n_groups = len(cells)
        centers = np.zeros((self.n_groups, 3))
        np.add.at(centers, inverse, flat)
        counts = np.bincount(inverse, minlength=self.n_groups).astype(np.float64)
        centers /= counts[:, None]
        d_c = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        self.color_mix = np.exp(-d_c / (2.0 * sigma_r**2))
        self.color_mix[self.color_mix < 1e-9] = 0.0

        tau_s = max(1.0, sigma_s / spatial_ratio)
        self.gh = int(math.floor((h - 1) / tau_s)) + 2
        self.gw = int(math.floor((w - 1) / tau_s)) + 2
        ys, xs = np.mgrid[0:h, 0:w]
        py = ys.ravel() / tau_s
        px = xs.ravel() / tau_s
        self.y0 = np.floor(py).astype(np.int64)
        self.x0 = np.floor(px).astype(np.int64)
        self.ty = py - self.y0
        self.tx = px - self.x0

        # splat+slice hats add 2*tau^2*E[t(1-t)] of variance per axis;
        # shrink the blur accordingly (zero correction when pixels sit on
        # grid nodes, i.e. tau == 1).
        self.blur_kernels = []
        for frac in (self.ty, self.tx):
            added = 2.0 * tau_s**2 * float(np.mean(frac * (1.0 - frac)))
            sigma_cells = math.sqrt(max(sigma_s**2 - added, 1e-6)) / tau_s
            radius = max(1, int(math.ceil(5.0 * sigma_cells)))
            u = np.arange(-radius, radius + 1, dtype=np.float64)
            self.blur_kernels.append(np.exp(-(u**2) / (2.0 * sigma_cells**2)))

        cell_base = self.group * (self.gh * self.gw)
        self._corner_idx = []
        self._corner_wgt = []
        for dy, wy in ((0, 1.0 - self.ty), (1, self.ty)):
            for dx, wx in ((0, 1.0 - self.tx), (1, self.tx)):
                idx = cell_base + (self.y0 + dy) * self.gw + (self.x0 + dx)
                self._corner_idx.append(idx)
                self._corner_wgt.append(wy * wx)

    def filter(self, field):
        """Approximate sum_j k_app(i,j) field_j for [H,W] or [H,W,L] input,
        including the j == i term."""
        arr = np.asarray(field, dtype=np.float64)
        squeeze = arr.ndim == 2
        if squeeze:
            arr = arr[..., None]
        n_lab = arr.shape[2]
        flat = arr.reshape(-1, n_lab)
        size = self.n_groups * self.gh * self.gw

        grids = np.zeros((size, n_lab))
        for idx, wgt in zip(self._corner_idx, self._corner_wgt):
            for l in range(n_lab):
                grids[:, l] += np.bincount(idx, weights=flat[:, l] * wgt, minlength=size)
        grids = grids.reshape(self.n_groups, self.gh, self.gw, n_lab)

        grids = correlate1d(grids, self.blur_kernels[0], axis=1, mode="constant", cval=0.0)
        grids = correlate1d(grids, self.blur_kernels[1], axis=2, mode="constant", cval=0.0)
        mixed = np.einsum("gh,hyxl->gyxl", self.color_mix, grids)

        out = np.zeros_like(flat)
        mixed_flat = mixed.reshape(size, n_lab)
        for idx, wgt in zip(self._corner_idx, self._corner_wgt):
            out += mixed_flat[idx] * wgt[:, None]
        out = out.reshape(self.shape + (n_lab,))
        return out[..., 0] if squeeze else out


def meanfield_infer(unary, image, params: CrfParams, mode="exact"):
    """Mean-field marginals [H,W,2] after ``params.iterations`` rounds.

    ``exact`` computes the O(N^2) kernel sums directly and is the
    correctness oracle; ``fast`` uses the bilateral grid + truncated
    convolution approximation and must agree with it on small images.
    """
    theta = np.asarray(unary, dtype=np.float64)
    img = np.asarray(image)
    if theta.ndim != 3 or theta.shape[2] != 2:
        raise ValueError(f"unary field must be [H,W,2], got {theta.shape}")
    if img.shape[:2] != theta.shape[:2]:
        raise ValueError(
            f"image resolution {img.shape[:2]} does not match unary field {theta.shape[:2]}"
        )
    if mode not in ("exact", "fast"):
        raise ValueError(f"unknown inference mode {mode!r}")

    h, w = theta.shape[:2]
    q = _softmax_neg(theta)

    if mode == "exact":
        k = kernel_matrix(img, params)
        theta_flat = theta.reshape(-1, 2)
        qf = q.reshape(-1, 2)
        for _ in range(params.iterations):
            msgs = k @ qf
            logits = theta_flat + msgs[:, ::-1]  # opposite label's mass couples
            qf = _softmax_neg(logits)
        return qf.reshape(h, w, 2)

    grid = _BilateralGrid(img, params.sigma_alpha, params.sigma_beta)
    self_weight = params.w1 + params.w2
    for _ in range(params.iterations):
        full = params.w1 * grid.filter(q) + params.w2 * np.stack(
            [_spatial_sum(q[..., l], params.sigma_gamma) for l in range(2)], axis=-1
        )
        msgs = full - self_weight * q  # remove the j == i contribution
        q = _softmax_neg(theta + msgs[..., ::-1])
    return q


def refine_masks(stack, image, params: CrfParams, mode="fast"):
    """Refine each class heatmap independently; returns [N,H,W] {0,1} masks."""
    maps = stack.maps if hasattr(stack, "maps") else np.asarray(stack)
    img = np.asarray(image)
    if maps.ndim != 3:
        raise ValueError(f"expected a [N,H,W] stack, got {maps.shape}")
    if img.shape[:2] != maps.shape[1:]:
        raise ValueError(
            f"image resolution {img.shape[:2]} does not match masks {maps.shape[1:]}"
        )
    out = np.zeros(maps.shape, dtype=np.uint8)
    for k in range(maps.shape[0]):
        theta = unary_from_saliency(maps[k])
        q = meanfield_infer(theta, img, params, mode=mode)
        out[k] = (np.argmax(q, axis=-1) == OBJECT).astype(np.uint8)
    return out
