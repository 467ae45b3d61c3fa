"""Hand-designed augmentations built from random image pyramids.

A pyramid is a stack of i.i.d. standard-normal images ``L_i`` of size
``2**i``.  Starting from ``I_0 = w_0 L_0`` every level is upscaled by two
and the next weighted level is added, so the weights directly control the
frequency content of the synthesized image.

Stage parameters live in a versioned TOML file shipped with the package
(``handmade_v1.toml``); :func:`load_handmade_params` reads it or a
user-supplied replacement.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import diff_ops
from .tag_model import RenderOutput

HANDMADE_STAGES = ("blur", "lighting", "background", "noise", "spotlights")
LEARNABLE_STAGES = diff_ops.STAGES[:3]


def upscale(img: np.ndarray, mode: str = "bilinear") -> np.ndarray:
    """Double the size of the last two axes."""
    img = np.asarray(img, dtype=np.float64)
    if mode == "nearest":
        return img.repeat(2, axis=-2).repeat(2, axis=-1)
    if mode == "bilinear":
        return diff_ops.resize(img, 2 * img.shape[-2], 2 * img.shape[-1])
    raise ValueError(f"unknown upscale mode {mode!r}")


def sample_pyramid(weights, rng: np.random.Generator, n: int | None = None, mode: str = "bilinear") -> np.ndarray:
    """Synthesize ``I_k`` for ``k = len(weights) - 1``; image size is ``2**k``.

    With ``n`` given, returns a batch of shape ``(n, 2**k, 2**k)``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    batch = () if n is None else (n,)
    out = weights[0] * rng.standard_normal(batch + (1, 1))
    for i in range(1, len(weights)):
        size = 2**i
        out = weights[i] * rng.standard_normal(batch + (size, size)) + upscale(out, mode)
    return out


def fit_weights(weights, n_levels: int, align: str = "coarse") -> np.ndarray:
    """Adapt a weight vector to a pyramid with ``n_levels`` levels.

    ``align="coarse"`` keeps the weight of level ``i`` for the ``2**i`` image
    (same frequency relative to the image); ``align="fine"`` keeps the
    finest levels aligned, which is what per-pixel noise needs.
    """
    w = np.asarray(weights, dtype=np.float64)
    out = np.zeros(n_levels)
    if align == "coarse":
        k = min(n_levels, len(w))
        out[:k] = w[:k]
    elif align == "fine":
        k = min(n_levels, len(w))
        out[n_levels - k:] = w[len(w) - k:]
    else:
        raise ValueError(f"unknown alignment {align!r}")
    return out


def _levels(resolution: int) -> int:
    k = int(round(math.log2(resolution)))
    if 2**k != resolution or resolution < 4:
        raise ValueError(f"pyramid augmentations need a power-of-two resolution >= 4, got {resolution}")
    return k + 1


@dataclass(frozen=True)
class SpotlightParams:
    """Gaussian spotlights: ``centers`` (n, 2) as (x, y) px, ``covariances`` (n, 2, 2)."""

    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    covariances: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    amplitudes: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for cov in np.asarray(self.covariances):
            if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() <= 0:
                raise ValueError("spotlight covariance must be symmetric positive definite")


@dataclass(frozen=True)
class HandmadeParams:
    """Distributions of the handmade stages.

    Pixel lengths refer to a 64 px canvas and are scaled with the resolution.
    """

    blur_sigma: tuple[float, float] = (0.0, 2.0)
    lighting_weights: tuple[float, ...] = (0.6, 0.3, 0.1, 0.05, 0.0, 0.0, 0.0)
    shift_weights: tuple[float, ...] = (0.25, 0.1, 0.04, 0.0, 0.0, 0.0, 0.0)
    scale_center: float = 0.55
    scale_half_width: float = 0.45
    shift_center: float = 0.0
    shift_half_width: float = 0.5
    background_weights: tuple[float, ...] = (0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625, 0.0078125)
    noise_weights: tuple[float, float] = (0.05, 0.05)
    spotlight_rate: float = 1.0
    spotlight_max: int = 3
    spotlight_amplitude: tuple[float, float] = (0.2, 1.5)
    spotlight_sigma_px: tuple[float, float] = (2.0, 6.0)

    def __post_init__(self):
        lo, hi = self.blur_sigma
        if not 0 <= lo <= hi <= diff_ops.BLUR_SIGMA:
            raise ValueError(f"blur sigma range must lie within [0, {diff_ops.BLUR_SIGMA}]")
        if len(self.noise_weights) != 2:
            raise ValueError("noise uses exactly the two finest pyramid levels")
        if self.spotlight_amplitude[1] > 1.5:
            raise ValueError("spotlight amplitude is bounded by 1.5")

    @classmethod
    def identity(cls) -> "HandmadeParams":
        """Parameters under which every handmade stage returns its input."""
        return cls(
            blur_sigma=(0.0, 0.0),
            lighting_weights=(0.0,),
            shift_weights=(0.0,),
            scale_center=1.0,
            scale_half_width=0.0,
            background_weights=(0.0,),
            noise_weights=(0.0, 0.0),
            spotlight_rate=0.0,
        )


def load_handmade_params(path: str | Path | None = None) -> HandmadeParams:
    """Read stage parameters from a TOML file (the packaged defaults if ``path`` is None)."""
    if path is None:
        text = resources.files("rendersynth").joinpath("handmade_v1.toml").read_text()
    else:
        text = Path(path).read_text()
    data = tomllib.loads(text)
    if data.pop("version", None) != 1:
        raise ValueError("unsupported handmade parameter file version")
    known = {f.name for f in dataclasses.fields(HandmadeParams)}
    flat = {}
    for section, values in data.items():
        if not isinstance(values, dict):
            raise ValueError(f"expected a table, got key {section!r}")
        for key, value in values.items():
            name = f"{section}_{key}"
            if name not in known:
                raise ValueError(f"unknown handmade parameter {section}.{key}")
            flat[name] = tuple(value) if isinstance(value, list) else value
    return HandmadeParams(**flat)


# -- stages -------------------------------------------------------------------

def hm_blur(x, rng: np.random.Generator, params: HandmadeParams = HandmadeParams()) -> np.ndarray:
    scale = x.shape[-1] / 64.0
    sigma = rng.uniform(*params.blur_sigma) * scale
    return diff_ops.gaussian_blur(x, sigma)


def _map_interval(p, center: float, half_width: float) -> np.ndarray:
    return center + half_width * np.clip(p, -1.0, 1.0)


def lighting_maps(resolution: int, rng: np.random.Generator, params: HandmadeParams = HandmadeParams()):
    """Draw pyramid-based ``(s_w, s_b, t)`` mapped into their legal intervals."""
    levels = _levels(resolution)
    lw = fit_weights(params.lighting_weights, levels)
    tw = fit_weights(params.shift_weights, levels)
    s_w = _map_interval(sample_pyramid(lw, rng), params.scale_center, params.scale_half_width)
    s_b = _map_interval(sample_pyramid(lw, rng), params.scale_center, params.scale_half_width)
    t = _map_interval(sample_pyramid(tw, rng), params.shift_center, params.shift_half_width)
    lo, hi = diff_ops.SCALE_CLIP.a, diff_ops.SCALE_CLIP.b
    s_w, s_b = np.clip(s_w, lo, hi), np.clip(s_b, lo, hi)
    t = np.clip(t, diff_ops.SHIFT_CLIP.a, diff_ops.SHIFT_CLIP.b)
    return s_w, s_b, t


def hm_lighting(x, rng: np.random.Generator, params: HandmadeParams = HandmadeParams()) -> np.ndarray:
    s_w, s_b, t = lighting_maps(x.shape[-1], rng, params)
    if params.scale_half_width == 0 and params.scale_center == 1.0 and not np.any(t):
        return np.array(x, dtype=np.float64)
    return diff_ops.phi_lighting(x, s_w, s_b, t)


def hm_background(x, bg_mask, rng: np.random.Generator, params: HandmadeParams = HandmadeParams()) -> np.ndarray:
    weights = fit_weights(params.background_weights, _levels(x.shape[-1]))
    return diff_ops.phi_bg(x, bg_mask, sample_pyramid(weights, rng))


def hm_noise(x, rng: np.random.Generator, params: HandmadeParams = HandmadeParams()) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    weights = fit_weights(params.noise_weights, _levels(x.shape[-1]), align="fine")
    if not weights.any():
        return x.copy()
    return x + sample_pyramid(weights, rng)


def hm_spotlights(x, p: SpotlightParams) -> np.ndarray:
    """Add ``A_j exp(-0.5 (u - c_j)^T S_j^-1 (u - c_j))`` for every spotlight."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    if len(p.amplitudes) == 0:
        return out
    centers = np.arange(x.shape[-1]) + 0.5
    py, px = np.meshgrid(np.arange(x.shape[-2]) + 0.5, centers, indexing="ij")
    for c, cov, amp in zip(p.centers, p.covariances, p.amplitudes):
        d = np.stack([px - c[0], py - c[1]], axis=-1)
        q = np.einsum("...i,ij,...j->...", d, np.linalg.inv(cov), d)
        out = out + amp * np.exp(-0.5 * q)
    return out


def sample_spotlights(bg_mask, rng: np.random.Generator, params: HandmadeParams = HandmadeParams()) -> SpotlightParams:
    """Poisson number of spotlights centered on random tag (foreground) pixels."""
    count = min(int(rng.poisson(params.spotlight_rate)), params.spotlight_max) if params.spotlight_rate > 0 else 0
    fg = np.argwhere(np.asarray(bg_mask) == 0)
    if count == 0 or len(fg) == 0:
        return SpotlightParams()
    scale = bg_mask.shape[-1] / 64.0
    rows, cols = fg[rng.integers(0, len(fg), count)].T
    centers = np.stack([cols + rng.uniform(0, 1, count), rows + rng.uniform(0, 1, count)], axis=1)
    covs = []
    for _ in range(count):
        sig = rng.uniform(*params.spotlight_sigma_px, 2) * scale
        angle = rng.uniform(0, np.pi)
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        covs.append(rot @ np.diag(sig**2) @ rot.T)
    amps = rng.uniform(*params.spotlight_amplitude, count)
    return SpotlightParams(centers=centers, covariances=np.array(covs), amplitudes=amps)


# -- dataset variants -----------------------------------------------------------

@dataclass(frozen=True)
class HandmadeConfig:
    """Which stages come from the learned generator and which are handmade."""

    name: str
    learned: tuple[str, ...]
    handmade: tuple[str, ...]
    params: HandmadeParams = HandmadeParams()

    def __post_init__(self):
        if set(self.learned) - set(LEARNABLE_STAGES):
            raise ValueError(f"learned stages must be among {LEARNABLE_STAGES}")
        if set(self.handmade) - set(HANDMADE_STAGES):
            raise ValueError(f"handmade stages must be among {HANDMADE_STAGES}")
        if set(self.learned) & set(self.handmade):
            raise ValueError("a stage cannot be both learned and handmade")
        if tuple(self.learned) != LEARNABLE_STAGES[: len(self.learned)]:
            raise ValueError("learned stages must form a prefix of blur, lighting, background")


HM_3D = HandmadeConfig("hm_3d", learned=(), handmade=HANDMADE_STAGES)
HM_LI = HandmadeConfig("hm_li", learned=("blur", "lighting"), handmade=("background", "noise", "spotlights"))
HM_BG = HandmadeConfig("hm_bg", learned=("blur", "lighting", "background"), handmade=("noise", "spotlights"))
VARIANTS = {c.name: c for c in (HM_3D, HM_LI, HM_BG)}


def apply_handmade(
    render: RenderOutput,
    cfg: HandmadeConfig,
    rng: np.random.Generator,
    learned_image: np.ndarray | None = None,
) -> np.ndarray:
    """Apply the handmade stages of ``cfg`` in cascade order to one rendered tag.

    ``learned_image`` is the output of the learned stage prefix (required
    whenever ``cfg.learned`` is nonempty).
    """
    if cfg.learned and learned_image is None:
        raise ValueError(f"variant {cfg.name} needs the output of the learned stages {cfg.learned}")
    x = np.asarray(learned_image if cfg.learned else render.image, dtype=np.float64)
    p = cfg.params
    for stage in HANDMADE_STAGES:
        if stage not in cfg.handmade:
            continue
        if stage == "blur":
            x = hm_blur(x, rng, p)
        elif stage == "lighting":
            x = hm_lighting(x, rng, p)
        elif stage == "background":
            x = hm_background(x, render.bg_mask, rng, p)
        elif stage == "noise":
            x = hm_noise(x, rng, p)
        else:
            x = hm_spotlights(x, sample_spotlights(render.bg_mask, rng, p))
    return x
