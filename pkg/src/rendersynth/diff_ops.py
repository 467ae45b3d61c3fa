"""Constrained, label-preserving augmentation stages with analytic gradients.

Every stage works on arrays of shape ``(..., H, W)`` so that a batch of
images is processed in one call.  Per-image scalars (the blur strength
``alpha``) have shape ``(...)``.  Each forward function ``f`` has a matching
``f_vjp`` that returns the vector-Jacobian products for all differentiable
inputs given the upstream gradient.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .tag_model import RenderOutput, white_mask

BLUR_SIGMA = 2.0
LIGHT_SIGMA = 4.0
HIGHPASS_SIGMA = 3.5
HIGHPASS_REPEATS = 3
GAMMA = 15.0

STAGES = ("blur", "lighting", "background", "detail")


@dataclass(frozen=True)
class ClipConfig:
    a: float
    b: float
    gamma: float = GAMMA

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"clip bounds must satisfy a < b, got [{self.a}, {self.b}]")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


ALPHA_CLIP = ClipConfig(0.0, 1.0)
SCALE_CLIP = ClipConfig(0.10, 1.0)
SHIFT_CLIP = ClipConfig(-0.5, 0.5)
BACKGROUND_CLIP = ClipConfig(-1.0, 1.0)
DETAIL_CLIP = ClipConfig(-2.0, 2.0)

PARAM_CLIPS = {
    "alpha": ALPHA_CLIP,
    "s_w": SCALE_CLIP,
    "s_b": SCALE_CLIP,
    "t": SHIFT_CLIP,
    "bg": BACKGROUND_CLIP,
    "detail": DETAIL_CLIP,
}


# -- gaussian blur ------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at ``ceil(3 sigma)`` and normalized to sum 1."""
    radius = int(math.ceil(3 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def _reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    # reflect without repeating the edge sample: (d c b | a b c d | c b a)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.abs(i) % period
    return np.where(i >= n, period - i, i)


@functools.lru_cache(maxsize=64)
def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """Dense ``n x n`` operator of the 1-D reflect-padded Gaussian convolution."""
    m = np.zeros((n, n))
    if sigma == 0:
        np.fill_diagonal(m, 1.0)
    else:
        w = gaussian_kernel(sigma)
        radius = len(w) // 2
        rows = np.repeat(np.arange(n), len(w))
        offsets = np.tile(np.arange(-radius, radius + 1), n)
        cols = _reflect_index(rows + offsets, n)
        np.add.at(m, (rows, cols), np.tile(w, n))
    m.setflags(write=False)
    return m


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the last two axes with reflect borders."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    mh = blur_matrix(x.shape[-2], float(sigma))
    mw = blur_matrix(x.shape[-1], float(sigma))
    return mh @ x @ mw.T


def gaussian_blur_vjp(g: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.array(g, dtype=np.float64)
    mh = blur_matrix(g.shape[-2], float(sigma))
    mw = blur_matrix(g.shape[-1], float(sigma))
    return mh.T @ g @ mw


@functools.lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear ``n_out x n_in`` resampling operator with half-pixel centers.

    Samples beyond the outermost source centers are clamped to the edge.
    For power-of-two factors all weights are exact binary fractions, so a
    constant input is reproduced bit-exactly.
    """
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    m.setflags(write=False)
    return m


def resize(x: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    """Bilinear resampling of the last two axes."""
    x = np.asarray(x, dtype=np.float64)
    width = height if width is None else width
    return resize_matrix(x.shape[-2], height) @ x @ resize_matrix(x.shape[-1], width).T


def resize_vjp(g: np.ndarray, in_height: int, in_width: int | None = None) -> np.ndarray:
    in_width = in_height if in_width is None else in_width
    return resize_matrix(in_height, g.shape[-2]).T @ g @ resize_matrix(in_width, g.shape[-1])


def _per_image(v, x: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1, 1)) if v.ndim < x.ndim else v


def _sum_image(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(-2, -1))


# -- blur ---------------------------------------------------------------------

def phi_blur(x: np.ndarray, alpha, sigma: float = BLUR_SIGMA) -> np.ndarray:
    """``(1 - alpha) (x - b(x)) + b(x)``: interpolate towards the blurred image."""
    x = np.asarray(x, dtype=np.float64)
    a = _per_image(alpha, x)
    bx = gaussian_blur(x, sigma)
    # same as (1 - a)(x - bx) + bx, but exactly x at a = 0
    return x + a * (bx - x)


def phi_blur_vjp(x, alpha, g, sigma: float = BLUR_SIGMA):
    x = np.asarray(x, dtype=np.float64)
    a = _per_image(alpha, x)
    bx = gaussian_blur(x, sigma)
    gx = (1 - a) * g + a * gaussian_blur_vjp(g, sigma)
    galpha = _sum_image(g * (bx - x))
    return gx, galpha.reshape(np.shape(alpha))


# -- lighting -----------------------------------------------------------------

def phi_lighting(x, s_w, s_b, t, sigma: float = LIGHT_SIGMA) -> np.ndarray:
    """Smoothly scale white and black parts separately and add a smooth shift."""
    x = np.asarray(x, dtype=np.float64)
    w = white_mask(x)
    return (
        x * gaussian_blur(s_w, sigma) * w
        + x * gaussian_blur(s_b, sigma) * (1 - w)
        + gaussian_blur(t, sigma)
    )


def phi_lighting_vjp(x, s_w, s_b, t, g, sigma: float = LIGHT_SIGMA):
    # the white mask is a constant factor: thresholding has no useful gradient
    x = np.asarray(x, dtype=np.float64)
    w = white_mask(x)
    bsw = gaussian_blur(s_w, sigma)
    bsb = gaussian_blur(s_b, sigma)
    gx = g * (bsw * w + bsb * (1 - w))
    gsw = gaussian_blur_vjp(g * x * w, sigma)
    gsb = gaussian_blur_vjp(g * x * (1 - w), sigma)
    gt = gaussian_blur_vjp(g, sigma)
    return gx, gsw, gsb, gt


# -- background ---------------------------------------------------------------

def phi_bg(x, bg_mask, d) -> np.ndarray:
    """Replace background pixels (``bg_mask == 1``) by ``d``."""
    x = np.asarray(x, dtype=np.float64)
    bg_mask = np.asarray(bg_mask, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if x.shape != bg_mask.shape or np.broadcast_shapes(x.shape, d.shape) != x.shape:
        raise ValueError(f"shape mismatch: x {x.shape}, mask {bg_mask.shape}, d {d.shape}")
    return np.where(bg_mask > 0, d, x)


def phi_bg_vjp(bg_mask, g):
    bg_mask = np.asarray(bg_mask, dtype=np.float64)
    return g * (1 - bg_mask), g * bg_mask


# -- detail -------------------------------------------------------------------

def highpass(d, sigma: float = HIGHPASS_SIGMA, repeats: int = HIGHPASS_REPEATS) -> np.ndarray:
    """Apply ``v - blur(v)`` ``repeats`` times."""
    v = np.asarray(d, dtype=np.float64)
    for _ in range(repeats):
        v = v - gaussian_blur(v, sigma)
    return v


def highpass_vjp(g, sigma: float = HIGHPASS_SIGMA, repeats: int = HIGHPASS_REPEATS) -> np.ndarray:
    v = np.asarray(g, dtype=np.float64)
    for _ in range(repeats):
        v = v - gaussian_blur_vjp(v, sigma)
    return v


def phi_detail(x, d) -> np.ndarray:
    """Add high-passed details; the result is deliberately not clamped."""
    return np.asarray(x, dtype=np.float64) + highpass(d)


def phi_detail_vjp(g):
    return np.array(g, dtype=np.float64), highpass_vjp(g)


# -- clip layer ---------------------------------------------------------------

def clip_with_penalty(v, cfg: ClipConfig):
    """Clip ``v`` into ``[a, b]`` and return ``gamma * L1 distance`` to the interval."""
    v = np.asarray(v, dtype=np.float64)
    clipped = np.clip(v, cfg.a, cfg.b)
    penalty = cfg.gamma * float(np.sum(np.abs(v - clipped)))
    return clipped, penalty


def clip_with_penalty_vjp(v, cfg: ClipConfig, g_out, g_penalty=1.0):
    """Straight-through inside the interval; the penalty slope is ``+-gamma`` outside."""
    v = np.asarray(v, dtype=np.float64)
    inside = (v >= cfg.a) & (v <= cfg.b)
    slope = np.where(v < cfg.a, -cfg.gamma, np.where(v > cfg.b, cfg.gamma, 0.0))
    return np.where(inside, g_out, 0.0) + g_penalty * slope


# -- composition --------------------------------------------------------------

@dataclass
class Tape:
    """Forward intermediates of :func:`compose` needed by :func:`compose_vjp`."""

    stages: tuple[str, ...]
    raw: dict[str, np.ndarray]
    clipped: dict[str, np.ndarray]
    inputs: dict[str, np.ndarray] = field(default_factory=dict)
    bg_mask: np.ndarray | None = None
    clip: bool = True


def compose(
    render: RenderOutput,
    alpha=None,
    s_w=None,
    s_b=None,
    t=None,
    bg=None,
    detail=None,
    stages: tuple[str, ...] = STAGES,
    clip: bool = True,
):
    """Run the augmentation cascade blur -> lighting -> background -> detail.

    Raw parameters pass through their clip layers first.  Only the stages
    listed in ``stages`` are applied; parameters of skipped stages are
    ignored.  ``render`` may hold batched arrays.  With ``clip=False`` the
    parameters are taken as already clipped by the caller.

    Returns:
        ``(image, penalty, tape)`` where ``penalty`` is the summed clip penalty.
    """
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages {sorted(unknown)}")
    given = {"alpha": alpha, "s_w": s_w, "s_b": s_b, "t": t, "bg": bg, "detail": detail}
    needed = _stage_params(stages)
    missing = [k for k in needed if given[k] is None]
    if missing:
        raise ValueError(f"missing parameters {missing} for stages {stages}")

    raw, clipped, penalty = {}, {}, 0.0
    for name in needed:
        raw[name] = np.asarray(given[name], dtype=np.float64)
        if clip:
            clipped[name], p = clip_with_penalty(raw[name], PARAM_CLIPS[name])
            penalty += p
        else:
            clipped[name] = raw[name]

    tape = Tape(stages=tuple(s for s in STAGES if s in stages), raw=raw, clipped=clipped,
                bg_mask=np.asarray(render.bg_mask, dtype=np.float64), clip=clip)
    x = np.asarray(render.image, dtype=np.float64)
    for stage in tape.stages:
        tape.inputs[stage] = x
        if stage == "blur":
            x = phi_blur(x, clipped["alpha"])
        elif stage == "lighting":
            x = phi_lighting(x, clipped["s_w"], clipped["s_b"], clipped["t"])
        elif stage == "background":
            x = phi_bg(x, tape.bg_mask, clipped["bg"])
        else:
            x = phi_detail(x, clipped["detail"])
    return x, penalty, tape


def _stage_params(stages) -> list[str]:
    names = []
    if "blur" in stages:
        names.append("alpha")
    if "lighting" in stages:
        names += ["s_w", "s_b", "t"]
    if "background" in stages:
        names.append("bg")
    if "detail" in stages:
        names.append("detail")
    return names


def compose_vjp(tape: Tape, g_image, g_penalty=1.0) -> dict[str, np.ndarray]:
    """Gradients of ``<g_image, image> + g_penalty * penalty`` w.r.t. the raw parameters.

    The returned dict also holds ``"x"``, the gradient w.r.t. the clean image.
    """
    g = np.asarray(g_image, dtype=np.float64)
    grads = {}
    for stage in reversed(tape.stages):
        x = tape.inputs[stage]
        c = tape.clipped
        if stage == "detail":
            g, grads["detail"] = phi_detail_vjp(g)
        elif stage == "background":
            g, grads["bg"] = phi_bg_vjp(tape.bg_mask, g)
            if np.ndim(tape.raw["bg"]) < g.ndim:
                grads["bg"] = _reduce_to(grads["bg"], np.shape(tape.raw["bg"]))
        elif stage == "lighting":
            g, grads["s_w"], grads["s_b"], grads["t"] = phi_lighting_vjp(x, c["s_w"], c["s_b"], c["t"], g)
        else:
            g, grads["alpha"] = phi_blur_vjp(x, c["alpha"], g)
    grads["x"] = g
    if not tape.clip:
        return grads
    for name, raw in tape.raw.items():
        grads[name] = clip_with_penalty_vjp(raw, PARAM_CLIPS[name], grads[name], g_penalty)
    return grads


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- generic dispatcher ---------------------------------------------------------

_VJP_INPUTS = {
    "gaussian_blur": ("sigma",),
    "phi_blur": ("x", "alpha"),
    "phi_lighting": ("x", "s_w", "s_b", "t"),
    "phi_bg": ("bg_mask",),
    "highpass": (),
    "phi_detail": (),
    "clip": ("v", "cfg"),
}


def vjp(stage: str, inputs: dict, upstream) -> dict[str, np.ndarray]:
    """Vector-Jacobian product of a named stage given its recorded forward inputs.

    Raises:
        KeyError: for an unknown stage.
        ValueError: if a recorded forward input is missing.
    """
    if stage not in _VJP_INPUTS:
        raise KeyError(f"unknown stage {stage!r}")
    missing = [k for k in _VJP_INPUTS[stage] if k not in inputs]
    if missing:
        raise ValueError(f"forward inputs {missing} not recorded for {stage}")
    g = np.asarray(upstream, dtype=np.float64)
    if stage == "gaussian_blur":
        return {"x": gaussian_blur_vjp(g, inputs["sigma"])}
    if stage == "phi_blur":
        gx, ga = phi_blur_vjp(inputs["x"], inputs["alpha"], g)
        return {"x": gx, "alpha": ga}
    if stage == "phi_lighting":
        gx, gsw, gsb, gt = phi_lighting_vjp(inputs["x"], inputs["s_w"], inputs["s_b"], inputs["t"], g)
        return {"x": gx, "s_w": gsw, "s_b": gsb, "t": gt}
    if stage == "phi_bg":
        gx, gd = phi_bg_vjp(inputs["bg_mask"], g)
        return {"x": gx, "d": gd}
    if stage == "highpass":
        return {"d": highpass_vjp(g)}
    if stage == "phi_detail":
        gx, gd = phi_detail_vjp(g)
        return {"x": gx, "d": gd}
    g_penalty = inputs.get("g_penalty", 0.0)
    return {"v": clip_with_penalty_vjp(inputs["v"], inputs["cfg"], g, g_penalty)}
