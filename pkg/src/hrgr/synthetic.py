"""Seeded synthetic feature maps and copy-move forgeries."""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = ["SyntheticSpec", "gen_blobs", "gen_forgery"]

KINDS = ("blobs", "forgery")


@dataclass(frozen=True)
class SyntheticSpec:
    h: int = 32
    w: int = 32
    kind: str = "blobs"
    grid: tuple = (4, 4)
    channels: int = 8
    sigma: float = 0.05
    seed: int = 0
    # forgery: additive shift applied to the pasted patch
    shift: float = 0.25

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValueError(f"size must be positive, got {self.h}x{self.w}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        gh, gw = self.grid
        if not (1 <= gh <= self.h and 1 <= gw <= self.w):
            raise ValueError(f"grid {self.grid} does not fit {self.h}x{self.w}")


def gen_blobs(spec):
    """Piecewise-constant ``h x w x c`` features on a block grid plus Gaussian noise.

    Returns ``(features, labels)`` with 1-based block ids in row-major order.
    Block vectors are redrawn until every pair is more than ``6 * sigma``
    apart.
    """
    rng = np.random.default_rng(spec.seed)
    gh, gw = spec.grid
    n_blocks = gh * gw
    min_sep = 6.0 * spec.sigma
    for _ in range(1000):
        centers = rng.uniform(-1.0, 1.0, size=(n_blocks, spec.channels))
        dist = np.sqrt(((centers[:, None] - centers[None]) ** 2).sum(-1))
        sep = dist[np.triu_indices(n_blocks, k=1)].min() if n_blocks > 1 else np.inf
        if sep > min_sep:
            break
    else:
        raise RuntimeError("could not draw separated block vectors")
    ys = (np.arange(spec.h) * gh) // spec.h
    xs = (np.arange(spec.w) * gw) // spec.w
    labels = (ys[:, None] * gw + xs[None, :]).astype(np.int64)
    features = centers[labels]
    if spec.sigma > 0:
        features = features + spec.sigma * rng.standard_normal(features.shape)
    return features, (labels + 1).astype(np.uint32)


def _smooth_background(rng, h, w):
    noise = rng.standard_normal((h, w, 3))
    smooth = np.stack([gaussian_filter(noise[..., c], sigma=max(h, w) / 8.0, mode="wrap")
                       for c in range(3)], axis=-1)
    lo = smooth.min(axis=(0, 1), keepdims=True)
    hi = smooth.max(axis=(0, 1), keepdims=True)
    return 0.2 + 0.6 * (smooth - lo) / np.maximum(hi - lo, 1e-12)


def _shape_mask(rng, h, w):
    rh = rng.integers(max(2, h // 6), max(3, h // 2) + 1)
    rw = rng.integers(max(2, w // 6), max(3, w // 2) + 1)
    top = rng.integers(0, h - rh + 1)
    left = rng.integers(0, w - rw + 1)
    mask = np.zeros((h, w), dtype=bool)
    if rng.random() < 0.5:
        mask[top:top + rh, left:left + rw] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = top + (rh - 1) / 2.0, left + (rw - 1) / 2.0
        mask = ((yy - cy) / (rh / 2.0)) ** 2 + ((xx - cx) / (rw / 2.0)) ** 2 <= 1.0
    return mask, (top, left, rh, rw)


def gen_forgery(spec):
    """Copy-move forgery on a smooth random background.

    A rectangle or ellipse is copied from another location of the same
    image, shifted in intensity and pasted.  Returns ``(image, mask)`` with
    ``image`` ``h x w x 3`` and ``mask`` the 0/1 pasted support; the mask
    covers between 2% and 30% of the image.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.h, spec.w
    image = _smooth_background(rng, h, w)
    for _ in range(1000):
        mask, (top, left, rh, rw) = _shape_mask(rng, h, w)
        frac = mask.mean()
        if not 0.02 <= frac <= 0.30:
            continue
        sy = rng.integers(0, h - rh + 1)
        sx = rng.integers(0, w - rw + 1)
        if abs(sy - top) < rh // 2 and abs(sx - left) < rw // 2:
            continue
        break
    else:
        raise RuntimeError("could not place a forged region")
    shift = spec.shift
    patch = image[sy:sy + rh, sx:sx + rw] + shift
    region = image[top:top + rh, left:left + rw]
    local = mask[top:top + rh, left:left + rw]
    region[local] = patch[local]
    if spec.sigma > 0:
        image = image + spec.sigma * rng.standard_normal(image.shape)
    frac = mask.mean()
    assert 0.02 <= frac <= 0.30, frac
    return image, mask.astype(np.uint32)
