"""Deterministic ellipse phantoms with small bright lesions.

Each phantom is a body of 2-4 nested ellipses on a dark background. With
probability ``lesion_prob`` it also carries 1-3 small high-contrast
elliptical lesions, which form the segmentation mask and the presence label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sampling import round_half_away

MIN_SIZE = 16
LESION_AREA_BOUNDS = (0.002, 0.05)
LESION_INTENSITY = (0.9, 1.0)
BODY_INTENSITY = (0.15, 0.65)


@dataclass
class Phantom:
    image: np.ndarray
    seg_mask: np.ndarray
    class_label: int
    meta: dict = field(default_factory=dict)


def _ellipse(xx, yy, cx, cy, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _inside(px, py, cx, cy, a, b, theta, shrink):
    c, s = np.cos(theta), np.sin(theta)
    u = (px - cx) * c + (py - cy) * s
    v = -(px - cx) * s + (py - cy) * c
    return (u / (a * shrink)) ** 2 + (v / (b * shrink)) ** 2 <= 1.0


def _draw_lesions(rng, xx, yy, body, outer, size):
    """Draw 1-3 lesions inside the body; redraw until the area bound holds."""
    cx, cy, a, b, theta = outer
    px_scale = 2.0 / size  # grid spacing in normalized units
    lo, hi = LESION_AREA_BOUNDS
    for _ in range(200):
        count = int(rng.integers(1, 4))
        mask = np.zeros_like(body)
        for _ in range(count):
            while True:
                lx, ly = rng.uniform(-1, 1, size=2)
                if _inside(lx, ly, cx, cy, a, b, theta, 0.7):
                    break
            ra = max(1.0, rng.uniform(0.025, 0.06) * size) * px_scale
            rb = max(1.0, rng.uniform(0.025, 0.06) * size) * px_scale
            mask |= _ellipse(xx, yy, lx, ly, ra, rb, rng.uniform(0, np.pi))
        mask &= body
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask, count
    raise RuntimeError("could not place lesions within the area bounds")


def gen_phantom(size: int, seed: int, lesion_prob: float = 0.5,
                noise_sigma: float = 0.01) -> Phantom:
    """One ``size x size`` phantom, fully determined by ``seed``."""
    if size < MIN_SIZE:
        raise ValueError(f"phantom size must be >= {MIN_SIZE}, got {size}")
    if not 0.0 <= lesion_prob <= 1.0:
        raise ValueError("lesion_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    coords = (np.arange(size) + 0.5) * (2.0 / size) - 1.0
    xx, yy = np.meshgrid(coords, coords)

    n_layers = int(rng.integers(2, 5))
    cx, cy = rng.uniform(-0.08, 0.08, size=2)
    a, b = rng.uniform(0.6, 0.88, size=2)
    theta = rng.uniform(0, np.pi)
    outer = (cx, cy, a, b, theta)
    body = _ellipse(xx, yy, *outer)
    image = np.zeros((size, size))
    levels = rng.permutation(np.linspace(*BODY_INTENSITY, 6))[:n_layers]
    image[body] = levels[0]
    pa, pb, pcx, pcy = a, b, cx, cy
    for level in levels[1:]:
        ia, ib = pa * rng.uniform(0.45, 0.8), pb * rng.uniform(0.45, 0.8)
        ox, oy = rng.uniform(-1, 1, size=2) * 0.3
        icx, icy = pcx + ox * (pa - ia), pcy + oy * (pb - ib)
        image[_ellipse(xx, yy, icx, icy, ia, ib, theta + rng.uniform(-0.4, 0.4))] = level
        pa, pb, pcx, pcy = ia, ib, icx, icy

    has_lesion = rng.uniform() < lesion_prob
    seg = np.zeros((size, size), dtype=bool)
    n_lesions = 0
    if has_lesion:
        seg, n_lesions = _draw_lesions(rng, xx, yy, body, outer, size)
        image[seg] = rng.uniform(*LESION_INTENSITY)

    if noise_sigma > 0:
        image = image + rng.normal(0.0, noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    meta = {
        "seed": seed,
        "size": size,
        "layers": n_layers,
        "lesions": n_lesions,
        "lesion_area": int(seg.sum()),
    }
    return Phantom(image, seg.astype(np.uint8), int(has_lesion), meta)


@dataclass
class PhantomSet:
    """Stacked phantoms, convenient for vectorized passes."""

    images: np.ndarray
    masks: np.ndarray
    labels: np.ndarray
    seeds: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "PhantomSet":
        idx = np.asarray(idx, dtype=int)
        return PhantomSet(self.images[idx], self.masks[idx], self.labels[idx], self.seeds[idx])

    @classmethod
    def from_phantoms(cls, phantoms: list[Phantom]) -> "PhantomSet":
        return cls(
            np.stack([p.image for p in phantoms]),
            np.stack([p.seg_mask for p in phantoms]),
            np.array([p.class_label for p in phantoms], dtype=np.int64),
            np.array([p.meta["seed"] for p in phantoms], dtype=np.int64),
        )


def make_set(count: int, size: int, seed: int, lesion_prob: float = 0.5,
             noise_sigma: float = 0.01) -> PhantomSet:
    """``count`` phantoms with per-index seeds ``seed + i``."""
    return PhantomSet.from_phantoms(
        [gen_phantom(size, seed + i, lesion_prob, noise_sigma) for i in range(count)]
    )


def gen_dataset(count: int, size: int, seed: int, lesion_prob: float = 0.5,
                split: tuple[float, float] = (0.8, 0.2), noise_sigma: float = 0.01
                ) -> tuple[list[Phantom], list[Phantom]]:
    """Train/validation phantoms; index ``i`` always uses seed ``seed + i``."""
    train_frac, val_frac = split
    if train_frac <= 0 or val_frac <= 0 or train_frac + val_frac > 1 + 1e-12:
        raise ValueError("split fractions must be positive and sum to at most 1")
    n_train = round_half_away(count * train_frac)
    n_val = min(round_half_away(count * val_frac), count - n_train)
    phantoms = [gen_phantom(size, seed + i, lesion_prob, noise_sigma)
                for i in range(n_train + n_val)]
    return phantoms[:n_train], phantoms[n_train:]


def kfold_partition(count: int, folds: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Contiguous k-fold split: list of (train_indices, val_indices)."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if count < folds:
        raise ValueError(f"cannot split {count} samples into {folds} folds")
    idx = np.arange(count)
    parts = np.array_split(idx, folds)
    return [(np.concatenate(parts[:f] + parts[f + 1:]), parts[f]) for f in range(folds)]
