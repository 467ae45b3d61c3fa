"""Central finite-difference checks of every hand-written backward pass.

Each check draws random inputs, a random upstream gradient ``u`` and a
random direction ``v`` per differentiable input, then compares the
directional derivative of ``<u, f(inputs)>`` (central differences) with
``<vjp(u), v>``.  Inputs are kept away from kinks (clip bounds, the white
mask threshold) so that the finite differences are valid.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diff_ops
from .adversarial import TrainConfig, init_state, render_batch
from .tag_model import sample_labels

STEP = 1e-5
TOLERANCE = 1e-4


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def directional_fd(f, inputs: dict, directions: dict, h: float = STEP) -> float:
    plus = {k: inputs[k] + h * directions[k] if k in directions else inputs[k] for k in inputs}
    minus = {k: inputs[k] - h * directions[k] if k in directions else inputs[k] for k in inputs}
    return (f(**plus) - f(**minus)) / (2 * h)


def _away_from(rng, shape, lo, hi, kinks, margin=1e-3):
    x = rng.uniform(lo, hi, shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.where(x[near] >= k, margin, -margin) * 2
    return x


def _check(f, grads_fn, inputs, rng) -> float:
    """Worst relative error over one direction per differentiable input."""
    out = f(**inputs)
    u = rng.normal(size=np.shape(out))
    grads = grads_fn(inputs, u)
    worst = 0.0
    for name, g in grads.items():
        v = rng.normal(size=np.shape(inputs[name]))
        fd = directional_fd(lambda **kw: float(np.sum(u * f(**kw))), inputs, {name: v})
        worst = max(worst, rel_error(fd, float(np.sum(g * v))))
    return worst


def _stage_cases(rng, size: int):
    """``(name, forward, vjp adapter, inputs)`` for every stage of the augmentation cascade."""
    shape = (size, size)
    mask = (rng.random(shape) < 0.4).astype(np.float64)
    x = _away_from(rng, shape, -1, 1, kinks=[0.0])
    cfg = diff_ops.SCALE_CLIP
    lo, hi = cfg.a - 0.5, cfg.b + 0.5
    v = _away_from(rng, (3, size), lo, hi, kinks=[cfg.a, cfg.b])
    sigma = float(rng.uniform(0.5, 3.0))
    return [
        ("gaussian_blur", lambda x: diff_ops.gaussian_blur(x, sigma),
         lambda i, u: diff_ops.vjp("gaussian_blur", {"sigma": sigma}, u), {"x": x}),
        ("phi_blur", diff_ops.phi_blur,
         lambda i, u: diff_ops.vjp("phi_blur", i, u), {"x": x, "alpha": np.array(rng.uniform(0, 1))}),
        ("phi_lighting", diff_ops.phi_lighting,
         lambda i, u: diff_ops.vjp("phi_lighting", i, u),
         {"x": x, "s_w": rng.uniform(0.1, 1, shape), "s_b": rng.uniform(0.1, 1, shape),
          "t": rng.uniform(-0.5, 0.5, shape)}),
        ("phi_bg", lambda x, d: diff_ops.phi_bg(x, mask, d),
         lambda i, u: diff_ops.vjp("phi_bg", {**i, "bg_mask": mask}, u), {"x": x, "d": rng.uniform(-1, 1, shape)}),
        ("highpass", diff_ops.highpass, lambda i, u: diff_ops.vjp("highpass", i, u), {"d": rng.uniform(-2, 2, shape)}),
        ("phi_detail", diff_ops.phi_detail,
         lambda i, u: diff_ops.vjp("phi_detail", i, u), {"x": x, "d": rng.uniform(-2, 2, shape)}),
        ("clip", lambda v: diff_ops.clip_with_penalty(v, cfg)[0] + 0.0,
         lambda i, u: diff_ops.vjp("clip", {**i, "cfg": cfg}, u), {"v": v}),
        ("clip_penalty", lambda v: np.array(diff_ops.clip_with_penalty(v, cfg)[1]),
         lambda i, u: diff_ops.vjp("clip", {**i, "cfg": cfg, "g_penalty": float(u)}, np.zeros_like(i["v"])),
         {"v": v}),
    ]


def _compose_case(rng, size: int) -> float:
    """Whole cascade with clip layers, checked w.r.t. the image and every raw parameter."""
    labels = sample_labels(rng, 2, 16)
    renders = render_batch(labels, 16)
    if size != 16:
        renders = type(renders)(*(diff_ops.resize(a, size) for a in (renders.image, renders.bg_mask, renders.depth)))
        renders.bg_mask[:] = renders.bg_mask > 0.5
    shape = renders.image.shape
    params = {
        "alpha": _away_from(rng, (2,), -0.3, 1.3, [0, 1]),
        "s_w": _away_from(rng, shape, -0.2, 1.3, [0.1, 1]),
        "s_b": _away_from(rng, shape, -0.2, 1.3, [0.1, 1]),
        "t": _away_from(rng, shape, -0.8, 0.8, [-0.5, 0.5]),
        "bg": _away_from(rng, shape, -1.3, 1.3, [-1, 1]),
        "detail": _away_from(rng, shape, -2.5, 2.5, [-2, 2]),
    }
    image0 = _away_from(rng, shape, -1, 1, [0.0])
    u = rng.normal(size=shape)
    w_pen = float(rng.normal())

    def loss(x, **p):
        r = type(renders)(image=x, bg_mask=renders.bg_mask, depth=renders.depth)
        out, pen, _ = diff_ops.compose(r, **p)
        return float(np.sum(u * out)) + w_pen * pen

    _, _, tape = diff_ops.compose(type(renders)(image0, renders.bg_mask, renders.depth), **params)
    grads = diff_ops.compose_vjp(tape, u, w_pen)
    inputs = {"x": image0, **params}
    worst = 0.0
    for name in inputs:
        v = rng.normal(size=np.shape(inputs[name]))
        fd = directional_fd(loss, inputs, {name: v})
        worst = max(worst, rel_error(fd, float(np.sum(grads[name] * v))))
    return worst


def _generator_case(rng, seed: int) -> float:
    """Generator parameters and latent input against ``<u, image> + w * penalty``."""
    cfg = TrainConfig(resolution=16, n_z=4, hidden=8, seed=seed, head_init_std=0.3, detail_init_std=0.3)
    gen = init_state(cfg).gen
    labels = sample_labels(rng, 2, 16)
    renders = render_batch(labels, 16)
    z = rng.uniform(-1, 1, (2, cfg.n_z))
    image, _, cache = gen.forward(z, renders)
    u = rng.normal(size=image.shape)
    w_pen = float(rng.normal())
    grads, gz = gen.backward(cache, u, w_pen)
    base = dict(gen.params)

    def loss(**kw):
        gen.params = {k: kw[k] for k in base}
        img, pen, _ = gen.forward(kw["z"], renders)
        return float(np.sum(u * img)) + w_pen * pen

    inputs = {**base, "z": z}
    directions = {k: rng.normal(size=np.shape(a)) / np.sqrt(np.size(a)) for k, a in inputs.items()}
    fd = directional_fd(loss, inputs, directions)
    gen.params = base
    an = float(sum(np.sum(grads[k] * directions[k]) for k in base) + np.sum(gz * directions["z"]))
    return rel_error(fd, an)


def _discriminator_case(rng, seed: int) -> float:
    disc = init_state(TrainConfig(resolution=16, seed=seed)).disc
    x = rng.normal(size=(2, 16, 16))
    logits, cache = disc.forward(x)
    u = rng.normal(size=logits.shape)
    grads, gx = disc.backward(cache, u)
    base = dict(disc.params)

    def loss(**kw):
        disc.params = {k: kw[k] for k in base}
        return float(np.sum(u * disc.forward(kw["x"])[0]))

    inputs = {**base, "x": x}
    directions = {k: rng.normal(size=np.shape(a)) for k, a in inputs.items()}
    fd = directional_fd(loss, inputs, directions)
    disc.params = base
    an = float(sum(np.sum(grads[k] * directions[k]) for k in base) + np.sum(gx * directions["x"]))
    return rel_error(fd, an)


@dataclass
class GradcheckReport:
    seeds: int
    size: int
    tolerance: float = TOLERANCE
    max_error: dict[str, float] = field(default_factory=dict)

    def record(self, name: str, err: float) -> None:
        self.max_error[name] = max(self.max_error.get(name, 0.0), err)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_error.values())

    def failures(self) -> list[str]:
        return [k for k, e in self.max_error.items() if not e < self.tolerance]

    def to_text(self) -> str:
        lines = [f"gradcheck: {self.seeds} seeds, {self.size}x{self.size}, tolerance {self.tolerance:g}"]
        for name, err in self.max_error.items():
            lines.append(f"  {name:<14s} max rel. error {err:.2e}  {'ok' if err < self.tolerance else 'FAIL'}")
        lines.append("PASS" if self.passed else "FAIL: " + ", ".join(self.failures()))
        return "\n".join(lines)


def run_gradcheck(seeds: int = 20, size: int = 8, tolerance: float = TOLERANCE) -> GradcheckReport:
    if not 1 <= size <= 16:
        raise ValueError("gradient checks run on inputs of at most 16x16")
    report = GradcheckReport(seeds=seeds, size=size, tolerance=tolerance)
    for seed in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        for name, f, g, inputs in _stage_cases(rng, size):
            report.record(name, _check(f, g, inputs, rng))
        report.record("compose", _compose_case(rng, size))
        report.record("generator", _generator_case(rng, seed))
        report.record("discriminator", _discriminator_case(rng, seed))
    return report
