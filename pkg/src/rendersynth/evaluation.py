"""Mean Hamming distance, a pooled logistic reference decoder and label-preservation sweeps."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import diff_ops, pyramid_aug
from .tag_model import (N_BITS, DecodeFailure, TagLabel, UndecodableGeometry, decode_oracle, render,
                        sample_labels)

DEFAULT_L2 = 1e-2
PROVENANCES = ("rendergan", "hm_3d", "hm_li", "hm_bg", "realaug", "clean")


@dataclass
class LabeledDataset:
    images: np.ndarray
    bits: np.ndarray
    provenance: str
    labels: list[TagLabel] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.bits = np.asarray(self.bits, dtype=bool)
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if self.images.ndim != 3:
            raise ValueError("images must have shape (n, height, width) with one resolution")
        if self.bits.shape != (len(self.images), N_BITS):
            raise ValueError(f"bits must have shape ({len(self.images)}, {N_BITS})")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return len(self.images)


def mhd(predicted, true_bits) -> float:
    """Mean number of wrongly decoded bits per tag (probabilities rounded at 0.5)."""
    predicted = np.asarray(predicted, dtype=np.float64)
    true_bits = np.asarray(true_bits, dtype=bool)
    if predicted.shape != true_bits.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {true_bits.shape}")
    return float(np.mean(np.sum((predicted > 0.5) != true_bits, axis=-1)))


def pooled_features(images, grid: int = 8) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    if h % grid or w % grid:
        raise ValueError(f"image size {h}x{w} is not divisible by the pooling grid {grid}")
    return images.reshape(n, grid, h // grid, grid, w // grid).mean(axis=(2, 4)).reshape(n, -1)


@dataclass
class ReferenceDecoder:
    """One logistic model per bit over an 8x8 average-pooled view of the image."""

    weights: np.ndarray
    bias: np.ndarray
    feat_mean: np.ndarray
    feat_std: np.ndarray
    grid: int = 8

    def predict_proba(self, images) -> np.ndarray:
        f = (pooled_features(images, self.grid) - self.feat_mean) / self.feat_std
        if f.shape[1] == 0:
            raise ValueError("no features")
        return 1.0 / (1.0 + np.exp(-np.clip(f @ self.weights + self.bias, -60, 60)))


def train_reference_decoder(
    train: LabeledDataset,
    epochs: int = 30,
    lr: float = 0.01,
    batch_size: int = 128,
    l2: float = DEFAULT_L2,
    seed: int = 0,
    history: list | None = None,
) -> ReferenceDecoder:
    """Minibatch logistic regression with Adam; deterministic given ``seed``.

    If ``history`` is a list, the training-set MHD after every epoch is appended.
    """
    f = pooled_features(train.images)
    mean, std = f.mean(axis=0), f.std(axis=0) + 1e-6
    f = (f - mean) / std
    y = train.bits.astype(np.float64)
    dec = ReferenceDecoder(np.zeros((f.shape[1], N_BITS)), np.zeros(N_BITS), mean, std)
    rng = np.random.default_rng(seed)
    m = {"w": np.zeros_like(dec.weights), "b": np.zeros_like(dec.bias)}
    v = {"w": np.zeros_like(dec.weights), "b": np.zeros_like(dec.bias)}
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(f))
        for start in range(0, len(f), batch_size):
            idx = order[start : start + batch_size]
            p = 1.0 / (1.0 + np.exp(-np.clip(f[idx] @ dec.weights + dec.bias, -60, 60)))
            err = (p - y[idx]) / len(idx)
            grads = {"w": f[idx].T @ err + l2 * dec.weights, "b": err.sum(axis=0)}
            step += 1
            for k, param in (("w", dec.weights), ("b", dec.bias)):
                m[k] = 0.9 * m[k] + 0.1 * grads[k]
                v[k] = 0.999 * v[k] + 0.001 * grads[k] ** 2
                param -= lr * (m[k] / (1 - 0.9**step)) / (np.sqrt(v[k] / (1 - 0.999**step)) + 1e-8)
        if history is not None:
            history.append(mhd(dec.predict_proba(train.images), train.bits))
    return dec


def evaluate(decoder: ReferenceDecoder, test: LabeledDataset) -> float:
    return mhd(decoder.predict_proba(test.images), test.bits)


# -- label preservation -----------------------------------------------------------

LEARNED_SELECTORS = {
    "none": (),
    "blur": ("blur",),
    "lighting": ("lighting",),
    "background": ("background",),
    "detail": ("detail",),
    "full": diff_ops.STAGES,
    "bounded": diff_ops.STAGES[:3],
}
HANDMADE_SELECTORS = {f"hm_{s}": (s,) for s in pyramid_aug.HANDMADE_STAGES}
HANDMADE_SELECTORS["hm_3d"] = pyramid_aug.HANDMADE_STAGES


def sample_stage_params(rng: np.random.Generator, shape, mode: str = "uniform") -> dict[str, np.ndarray]:
    """Random in-bound raw inputs for every learned stage.

    ``mode="uniform"`` draws every element independently and uniformly from
    its clip interval.  ``mode="levels"`` gives scales and shifts a random
    per-image level plus per-pixel jitter, which stresses global contrast
    changes much harder.
    """
    def draw(clip: diff_ops.ClipConfig):
        if mode == "uniform":
            return rng.uniform(clip.a, clip.b, shape)
        level = rng.uniform(clip.a, clip.b)
        return np.clip(level + rng.uniform(-0.3, 0.3, shape), clip.a, clip.b)

    if mode not in ("uniform", "levels"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    return {
        "alpha": np.array(rng.uniform(0.0, 1.0)),
        "s_w": draw(diff_ops.SCALE_CLIP),
        "s_b": draw(diff_ops.SCALE_CLIP),
        "t": draw(diff_ops.SHIFT_CLIP),
        "bg": rng.uniform(-1.0, 1.0, shape),
        "detail": rng.uniform(-2.0, 2.0, shape),
    }


@dataclass
class SweepReport:
    selector: str
    n: int
    undecodable: int = 0
    flipped_samples: int = 0
    flipped_bits: int = 0
    decode_failures: int = 0
    per_stage: dict = field(default_factory=dict)

    @property
    def decodable(self) -> int:
        return self.n - self.undecodable

    @property
    def flip_rate(self) -> float:
        """Fraction of decoded bits that flipped; a decode failure counts as all bits wrong."""
        return (self.flipped_bits + N_BITS * self.decode_failures) / max(N_BITS * self.decodable, 1)

    @property
    def sample_flip_rate(self) -> float:
        """Fraction of decodable samples with any bit flip or a decode failure."""
        return (self.flipped_samples + self.decode_failures) / max(self.decodable, 1)

    def to_text(self) -> str:
        lines = [
            f"sweep {self.selector}: n={self.n} decodable={self.decodable}",
            f"  flipped samples {self.flipped_samples}, flipped bits {self.flipped_bits}, "
            f"decode failures {self.decode_failures}, bit flip rate {self.flip_rate:.4f}, "
            f"sample flip rate {self.sample_flip_rate:.4f}",
        ]
        for stage, counts in self.per_stage.items():
            lines.append(f"  after {stage:<11s} flipped {counts['flipped']:5d} failures {counts['failures']:5d}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["selector", "stage", "n", "decodable", "flipped_samples", "decode_failures"])
        for stage, counts in self.per_stage.items():
            w.writerow([self.selector, stage, self.n, self.decodable, counts["flipped"], counts["failures"]])
        w.writerow([self.selector, "total", self.n, self.decodable, self.flipped_samples, self.decode_failures])
        return buf.getvalue()


def _stage_outputs(out, label_selector: str, rng, params: pyramid_aug.HandmadeParams, mode: str):
    """Yield ``(stage, image)`` after each stage of the selected cascade."""
    x = out.image
    if label_selector in LEARNED_SELECTORS:
        stages = LEARNED_SELECTORS[label_selector]
        p = sample_stage_params(rng, x.shape, mode)
        for stage in stages:
            x, _, _ = diff_ops.compose(
                type(out)(image=x, bg_mask=out.bg_mask, depth=out.depth), stages=(stage,), **p
            )
            yield stage, x
        return
    for stage in HANDMADE_SELECTORS[label_selector]:
        cfg = pyramid_aug.HandmadeConfig("sweep", learned=(), handmade=(stage,), params=params)
        x = pyramid_aug.apply_handmade(type(out)(image=x, bg_mask=out.bg_mask, depth=out.depth), cfg, rng)
        yield stage, x


def preservation_sweep(
    selector: str,
    n: int,
    rng: np.random.Generator,
    resolution: int = 64,
    params: pyramid_aug.HandmadeParams = pyramid_aug.HandmadeParams(),
    mode: str = "uniform",
) -> SweepReport:
    """Render ``n`` random tags, augment with random in-bound parameters and decode.

    ``selector`` is one of the learned stages (``blur``, ``lighting``,
    ``background``, ``detail``), ``full``, ``bounded`` (all but detail),
    ``none``, a handmade stage ``hm_<stage>`` or ``hm_3d``.  ``mode`` picks
    the learned-stage parameter sampler (see :func:`sample_stage_params`).
    """
    if selector not in LEARNED_SELECTORS and selector not in HANDMADE_SELECTORS:
        raise ValueError(f"unknown sweep selector {selector!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    report = SweepReport(selector=selector, n=n)
    for label in sample_labels(rng, n, resolution):
        out = render(label, resolution)
        truth = label.bits_array()
        try:
            if not np.array_equal(decode_oracle(out.image, label), truth):
                raise DecodeFailure("clean render does not decode")
        except (UndecodableGeometry, DecodeFailure):
            report.undecodable += 1
            continue
        flipped = failed = False
        final = None
        for stage, x in _stage_outputs(out, selector, rng, params, mode):
            counts = report.per_stage.setdefault(stage, {"flipped": 0, "failures": 0})
            try:
                final = decode_oracle(x, label)
                flipped = bool((final != truth).any())
                failed = False
            except DecodeFailure:
                failed, flipped, final = True, False, None
            counts["flipped"] += flipped
            counts["failures"] += failed
        if failed:
            report.decode_failures += 1
        elif flipped:
            report.flipped_samples += 1
            report.flipped_bits += int((final != truth).sum())
    return report
