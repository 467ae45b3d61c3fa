"""Augmentations for (stand-in) real training images.

Each image gets a random affine warp, an intensity map ``s * I + t`` and
per-pixel Gaussian noise whose standard deviation ``eps`` is itself drawn
per image from ``max(0, N(0.04, 0.03))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

NOISE_MEAN = 0.04
NOISE_STD = 0.03

RANGES = {
    "s": (0.9, 1.1),
    "t": (-0.2, 0.2),
    "rotation": (0.0, 2 * np.pi),
    "scale": (0.7, 1.1),
    "shear": (-0.3, 0.3),
    "tx": (-4.0, 4.0),
    "ty": (-4.0, 4.0),
}


@dataclass(frozen=True)
class RealAugParams:
    s: float = 1.0
    t: float = 0.0
    eps: float = 0.0
    rotation: float = 0.0
    scale: float = 1.0
    shear: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def warp_matrix(self) -> np.ndarray:
        """Linear part of the warp in (x, y): shear @ scale @ rotation."""
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        shear = np.array([[1.0, self.shear], [0.0, 1.0]])
        return shear @ (self.scale * rot)

    def is_identity_warp(self) -> bool:
        return self.rotation == 0 and self.scale == 1 and self.shear == 0 and self.tx == 0 and self.ty == 0


def sample_real_aug(rng: np.random.Generator) -> RealAugParams:
    draws = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in RANGES.items()}
    eps = max(0.0, float(rng.normal(NOISE_MEAN, NOISE_STD)))
    return RealAugParams(eps=eps, **draws)


def warp(x: np.ndarray, p: RealAugParams) -> np.ndarray:
    """Affine warp about the image center, bilinear sampling, reflect padding."""
    x = np.asarray(x, dtype=np.float64)
    if p.is_identity_warp():
        return x.copy()
    h, w = x.shape
    center = np.array([(w - 1) / 2, (h - 1) / 2])
    # output = A (input - c) + c + shift, so input = A^-1 (output - c - shift) + c
    inv = np.linalg.inv(p.warp_matrix())
    shift = np.array([p.tx, p.ty])
    # scipy indexes (row, col) = (y, x)
    perm = np.array([[0, 1], [1, 0]])
    matrix = perm @ inv @ perm
    offset = perm @ (center - inv @ (center + shift))
    return ndimage.affine_transform(x, matrix, offset=offset, order=1, mode="reflect")


def apply_real_aug(x: np.ndarray, p: RealAugParams, rng: np.random.Generator) -> np.ndarray:
    """Warp, then ``s * I + t``, then add ``N(0, eps**2)`` noise per pixel."""
    out = p.s * warp(x, p) + p.t
    if p.eps > 0:
        out = out + rng.normal(0.0, p.eps, out.shape)
    return out


def expected_noise_level(mean: float = NOISE_MEAN, std: float = NOISE_STD) -> float:
    """Closed-form mean of ``max(0, N(mean, std))``."""
    from scipy.stats import norm

    z = mean / std
    return mean * norm.cdf(z) + std * norm.pdf(z)
