"""Seeded generation of labeled datasets for every variant.

Sample ``i`` of a dataset with seed ``s`` draws all of its randomness from
``SeedSequence([s, i])``, so any sample can be regenerated on its own and
generation fans out over threads without changing the result.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import diff_ops, pyramid_aug, real_aug
from .adversarial import GanState, render_batch
from .evaluation import LabeledDataset
from .tag_model import DEFAULT_POSES, PoseSampling, TagLabel, render, sample_labels

VARIANTS = ("clean", "hm_3d", "hm_li", "hm_bg", "rendergan", "realaug")
NEEDS_GENERATOR = ("hm_li", "hm_bg", "rendergan")


@dataclass(frozen=True)
class Sample:
    index: int
    image: np.ndarray
    label: TagLabel


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def worker_count(default: int | None = None) -> int:
    env = os.environ.get("RENDERSYNTH_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("RENDERSYNTH_THREADS must be >= 1")
        return n
    return default or os.cpu_count() or 1


def _learned(state: GanState, label: TagLabel, rng: np.random.Generator, stages) -> np.ndarray:
    renders = render_batch([label], state.cfg.resolution)
    z = rng.uniform(-1.0, 1.0, (1, state.cfg.n_z))
    _, _, cache = state.gen.forward(z, renders)
    image, _, _ = diff_ops.compose(renders, clip=False, stages=tuple(stages), **cache["tape"].clipped)
    return image[0]


def make_sample(
    variant: str,
    seed: int,
    index: int,
    resolution: int,
    state: GanState | None = None,
    params: pyramid_aug.HandmadeParams = pyramid_aug.HandmadeParams(),
    poses: PoseSampling = DEFAULT_POSES,
) -> Sample:
    """Deterministically build sample ``index`` of a ``variant`` dataset."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown dataset variant {variant!r}")
    if variant in NEEDS_GENERATOR:
        if state is None:
            raise ValueError(f"variant {variant} needs a trained generator checkpoint")
        if state.cfg.resolution != resolution:
            raise ValueError(f"checkpoint resolution {state.cfg.resolution} differs from {resolution}")
    rng = sample_rng(seed, index)
    label = sample_labels(rng, 1, resolution, poses)[0]
    out = render(label, resolution)
    if variant == "clean":
        image = out.image
    elif variant == "rendergan":
        image = _learned(state, label, rng, diff_ops.STAGES)
    elif variant == "realaug":
        cfg = pyramid_aug.HandmadeConfig("hm_3d", (), pyramid_aug.HANDMADE_STAGES, params)
        base = pyramid_aug.apply_handmade(out, cfg, rng)
        image = real_aug.apply_real_aug(base, real_aug.sample_real_aug(rng), rng)
    else:
        base = pyramid_aug.VARIANTS[variant]
        cfg = pyramid_aug.HandmadeConfig(base.name, base.learned, base.handmade, params)
        learned = _learned(state, label, rng, cfg.learned) if cfg.learned else None
        image = pyramid_aug.apply_handmade(out, cfg, rng, learned)
    return Sample(index, np.asarray(image, dtype=np.float64), label)


def generate_samples(variant: str, n: int, seed: int, resolution: int, threads: int | None = None, **kwargs):
    """All ``n`` samples in index order, built on a thread pool."""
    if n < 1:
        raise ValueError("n must be >= 1")
    with ThreadPoolExecutor(max_workers=worker_count(threads)) as pool:
        return list(pool.map(lambda i: make_sample(variant, seed, i, resolution, **kwargs), range(n)))


def generate_dataset(variant: str, n: int, seed: int, resolution: int, threads: int | None = None,
                     **kwargs) -> LabeledDataset:
    samples = generate_samples(variant, n, seed, resolution, threads, **kwargs)
    return LabeledDataset(
        images=np.stack([s.image for s in samples]),
        bits=np.stack([s.label.bits_array() for s in samples]),
        provenance=variant,
        labels=[s.label for s in samples],
    )
