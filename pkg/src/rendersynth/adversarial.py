"""Desk-scale adversarial fitting of the augmentation parameters.

Small dense generator heads map a latent vector (plus a pooled view of the
clean render and its depth map) to the inputs of every augmentation stage.
Each head ends in a clip layer, the clipped maps are upsampled to the image
size and pushed through :func:`rendersynth.diff_ops.compose`.  A small
strided-convolution discriminator separates the results from a stand-in
"real" distribution.  Both nets are trained with Adam, gradients computed
by hand end to end.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diff_ops, nn
from .pyramid_aug import HM_3D, HandmadeConfig, apply_handmade
from .tag_model import (DEFAULT_POSES, DecodeFailure, PoseSampling, RenderOutput, TagLabel,
                        UndecodableGeometry, decode_oracle, render, sample_labels)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    resolution: int = 16
    batch_size: int = 32
    steps_per_epoch: int = 80
    epochs: int = 30
    lr: float = 2e-4
    decay_epochs: tuple[int, ...] = (20, 25, 30)
    decay_factor: float = 0.25
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    n_z: int = 64
    hidden: int = 64
    # spread of the output-head weights around the identity point
    head_init_std: float = 0.05
    # the detail map reaches the image almost unfiltered, so it starts quieter
    detail_init_std: float = 0.005
    disc_channels: tuple[int, int] = (8, 16)

    def __post_init__(self):
        for name in ("resolution", "batch_size", "steps_per_epoch", "epochs", "n_z", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ValueError("decay epochs must be strictly increasing")
        if self.resolution < 16 or self.resolution & (self.resolution - 1):
            raise ValueError("resolution must be a power of two >= 16")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (0-based)."""
        n = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr * self.decay_factor**n


def render_batch(labels, resolution: int) -> RenderOutput:
    outs = [render(l, resolution) for l in labels]
    return RenderOutput(
        image=np.stack([o.image for o in outs]),
        bg_mask=np.stack([o.bg_mask for o in outs]),
        depth=np.stack([o.depth for o in outs]),
    )


# -- generator ----------------------------------------------------------------

class Generator:
    """Stage heads ``G_blur``, ``G_light``, ``G_bg`` and ``G_detail``."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator, head_init_std: float | None = None):
        self.resolution = r = cfg.resolution
        self.n_z = cfg.n_z
        self.light_res = min(8, r)
        self.bg_res = min(16, r)
        self.cond_res = min(8, r)
        head_std = cfg.head_init_std if head_init_std is None else head_init_std
        detail_std = cfg.detail_init_std if head_init_std is None else head_init_std
        n_cond = cfg.n_z + 2 * self.cond_res**2
        lr2 = self.light_res**2
        p: dict[str, np.ndarray] = {}
        nn.init_dense(rng, p, "blur.h", cfg.n_z, cfg.hidden)
        nn.init_dense(rng, p, "blur.out", cfg.hidden, 1, std=head_std)
        nn.init_dense(rng, p, "light.h", n_cond, cfg.hidden)
        nn.init_dense(rng, p, "light.out", cfg.hidden, 3 * lr2, std=head_std)
        p["light.out.b"][: 2 * lr2] = 1.0
        nn.init_dense(rng, p, "bg.h", n_cond, cfg.hidden)
        nn.init_dense(rng, p, "bg.out", cfg.hidden, self.bg_res**2, std=head_std)
        nn.init_dense(rng, p, "detail.h", n_cond, cfg.hidden)
        nn.init_dense(rng, p, "detail.out", cfg.hidden, r * r, std=detail_std)
        self.params = p

    def _heads(self):
        n = self.light_res**2
        return {
            "alpha": ("blur", lambda o: o[:, 0], None),
            "s_w": ("light", lambda o: o[:, :n], self.light_res),
            "s_b": ("light", lambda o: o[:, n : 2 * n], self.light_res),
            "t": ("light", lambda o: o[:, 2 * n :], self.light_res),
            "bg": ("bg", lambda o: o, self.bg_res),
            "detail": ("detail", lambda o: o, self.resolution),
        }

    def forward(self, z, renders: RenderOutput):
        """Return ``(images, total clip penalty, cache)`` for a batch."""
        p, r = self.params, self.resolution
        z = np.asarray(z, dtype=np.float64)
        n = z.shape[0]
        pool = r // self.cond_res
        cond = np.concatenate(
            [z, nn.avg_pool(renders.image, pool).reshape(n, -1), nn.avg_pool(renders.depth, pool).reshape(n, -1)],
            axis=1,
        )
        pre, hidden, outs = {}, {}, {}
        for net, x in (("blur", z), ("light", cond), ("bg", cond), ("detail", cond)):
            pre[net] = nn.dense(p, net + ".h", x)
            hidden[net] = nn.leaky_relu(pre[net])
            outs[net] = nn.dense(p, net + ".out", hidden[net])

        raw, full, penalty = {}, {}, 0.0
        for name, (net, take, res) in self._heads().items():
            v = take(outs[net])
            if res is not None:
                v = v.reshape(n, res, res)
            raw[name] = v
            clipped, pen = diff_ops.clip_with_penalty(v, diff_ops.PARAM_CLIPS[name])
            penalty += pen
            full[name] = clipped if res is None or res == r else diff_ops.resize(clipped, r)
        image, _, tape = diff_ops.compose(renders, clip=False, **full)
        cache = dict(z=z, cond=cond, pre=pre, hidden=hidden, raw=raw, tape=tape, n=n)
        return image, penalty, cache

    def backward(self, cache, g_image, g_penalty: float = 0.0):
        """Parameter gradients and ``dL/dz`` for ``L = <g_image, image> + g_penalty * penalty``."""
        p, r, n = self.params, self.resolution, cache["n"]
        g_full = diff_ops.compose_vjp(cache["tape"], g_image)
        g_out = {}
        for name, (net, _, res) in self._heads().items():
            g = g_full[name]
            if res is not None and res != r:
                g = diff_ops.resize_vjp(g, res)
            g = diff_ops.clip_with_penalty_vjp(cache["raw"][name], diff_ops.PARAM_CLIPS[name], g, g_penalty)
            g = g.reshape(n, -1) if res is not None else g[:, None]
            g_out.setdefault(net, []).append(g)
        grads: dict[str, np.ndarray] = {}
        gz = np.zeros_like(cache["z"])
        g_cond = np.zeros_like(cache["cond"])
        for net in ("blur", "light", "bg", "detail"):
            g = np.concatenate(g_out[net], axis=1)
            g = nn.dense_vjp(p, net + ".out", cache["hidden"][net], g, grads)
            g = nn.leaky_relu_vjp(cache["pre"][net], g)
            x = cache["z"] if net == "blur" else cache["cond"]
            gx = nn.dense_vjp(p, net + ".h", x, g, grads)
            if net == "blur":
                gz += gx
            else:
                g_cond += gx
        gz += g_cond[:, : self.n_z]
        return grads, gz

    def stage_params(self, z, renders: RenderOutput) -> dict[str, np.ndarray]:
        """Clipped, full-resolution stage inputs for inspection."""
        _, _, cache = self.forward(z, renders)
        return {k: cache["tape"].clipped[k] for k in cache["tape"].clipped}


def generator_forward(gen: Generator, z, labels):
    """Render ``labels`` and run the generator; returns ``(images, penalty, cache)``."""
    if isinstance(labels, TagLabel):
        labels = [labels]
    renders = render_batch(labels, gen.resolution)
    return gen.forward(np.atleast_2d(z), renders)


# -- discriminator --------------------------------------------------------------

class Discriminator:
    """Two stride-2 convolutions and a dense layer over images pooled to <= 32 px."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        self.input_res = min(32, cfg.resolution)
        self.pool = cfg.resolution // self.input_res
        c1, c2 = cfg.disc_channels
        p: dict[str, np.ndarray] = {}
        nn.init_conv(rng, p, "conv1", 1, c1)
        nn.init_conv(rng, p, "conv2", c1, c2)
        nn.init_dense(rng, p, "fc", c2 * (self.input_res // 4) ** 2, 1, std=0.01)
        self.params = p

    def forward(self, images):
        p = self.params
        x = nn.avg_pool(np.asarray(images, dtype=np.float64), self.pool)[:, None]
        a1 = nn.conv2d(p, "conv1", x)
        h1 = nn.leaky_relu(a1)
        a2 = nn.conv2d(p, "conv2", h1)
        h2 = nn.leaky_relu(a2).reshape(len(x), -1)
        logits = nn.dense(p, "fc", h2)[:, 0]
        return logits, dict(x=x, a1=a1, h1=h1, a2=a2, h2=h2)

    def backward(self, cache, g_logits):
        p = self.params
        grads: dict[str, np.ndarray] = {}
        g = nn.dense_vjp(p, "fc", cache["h2"], g_logits[:, None], grads)
        g = nn.leaky_relu_vjp(cache["a2"], g.reshape(cache["a2"].shape))
        g = nn.conv2d_vjp(p, "conv2", cache["h1"], g, grads)
        g = nn.leaky_relu_vjp(cache["a1"], g)
        g = nn.conv2d_vjp(p, "conv1", cache["x"], g, grads)
        return grads, nn.avg_pool_vjp(g[:, 0], self.pool)

    def score(self, images) -> np.ndarray:
        """Probability in (0, 1) that each image is real."""
        logits, _ = self.forward(images)
        return nn.sigmoid(logits)


def discriminator_forward(disc: Discriminator, images) -> np.ndarray:
    return disc.score(np.asarray(images)[None] if np.ndim(images) == 2 else images)


# -- training -------------------------------------------------------------------

@dataclass
class GanState:
    cfg: TrainConfig
    gen: Generator
    disc: Discriminator
    opt_g: nn.Adam
    opt_d: nn.Adam
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


@dataclass
class StepResult:
    d_loss: float
    g_loss: float
    penalty: float


def init_state(cfg: TrainConfig) -> GanState:
    init_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    init_rng = np.random.default_rng(init_seq)
    gen = Generator(cfg, init_rng)
    disc = Discriminator(cfg, init_rng)
    return GanState(
        cfg=cfg,
        gen=gen,
        disc=disc,
        opt_g=nn.Adam(cfg.lr, cfg.beta1, cfg.beta2),
        opt_d=nn.Adam(cfg.lr, cfg.beta1, cfg.beta2),
        rng=np.random.default_rng(data_seq),
    )


def _check_finite(**values):
    bad = {k: v for k, v in values.items() if not np.isfinite(v)}
    if bad:
        raise FloatingPointError(f"non-finite loss: {bad}")


def gan_step(state: GanState, real, z, renders: RenderOutput, update_generator: bool = True) -> StepResult:
    """One discriminator update followed by one (non-saturating) generator update."""
    real = np.asarray(real, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if real.shape[1:] != renders.image.shape[1:] or len(z) != len(renders.image):
        raise ValueError(f"batch shapes disagree: real {real.shape}, z {z.shape}, renders {renders.image.shape}")
    gen, disc = state.gen, state.disc
    fake, penalty, gcache = gen.forward(z, renders)
    n_real, n_fake = len(real), len(fake)

    l_real, c_real = disc.forward(real)
    l_fake, c_fake = disc.forward(fake)
    d_loss = float(np.mean(nn.softplus(-l_real)) + np.mean(nn.softplus(l_fake)))
    g_real, _ = disc.backward(c_real, -nn.sigmoid(-l_real) / n_real)
    g_fake, _ = disc.backward(c_fake, nn.sigmoid(l_fake) / n_fake)
    state.opt_d.update(disc.params, {k: g_real[k] + g_fake[k] for k in g_real})

    l_gen, c_gen = disc.forward(fake)
    mean_penalty = penalty / n_fake
    g_loss = float(np.mean(nn.softplus(-l_gen))) + mean_penalty
    _check_finite(d_loss=d_loss, g_loss=g_loss, penalty=mean_penalty)
    if update_generator:
        _, g_img = disc.backward(c_gen, -nn.sigmoid(-l_gen) / n_fake)
        grads, _ = gen.backward(gcache, g_img, g_penalty=1.0 / n_fake)
        state.opt_g.update(gen.params, grads)
    state.step += 1
    return StepResult(d_loss, g_loss, mean_penalty)


RealSource = Callable[[np.random.Generator, int], np.ndarray]


def handmade_source(
    resolution: int,
    variant: HandmadeConfig = HM_3D,
    poses: PoseSampling = DEFAULT_POSES,
) -> RealSource:
    """Stand-in real distribution: handmade augmentations of random clean renders."""
    if variant.learned:
        raise ValueError("the stand-in real source must be fully handmade")

    def source(rng: np.random.Generator, n: int) -> np.ndarray:
        labels = sample_labels(rng, n, resolution, poses)
        return np.stack([apply_handmade(render(l, resolution), variant, rng) for l in labels])

    return source


def _detail_flip_rate(state: GanState, labels, renders, z) -> float:
    """Fraction of decodable samples whose bits change in the detail stage."""
    _, _, cache = state.gen.forward(z, renders)
    tape = cache["tape"]
    before = tape.inputs["detail"]
    after = diff_ops.phi_detail(before, tape.clipped["detail"])
    flips = total = 0
    for i, label in enumerate(labels):
        try:
            ref = decode_oracle(before[i], label)
        except (UndecodableGeometry, DecodeFailure):
            continue
        total += 1
        try:
            flips += bool((decode_oracle(after[i], label) != ref).any())
        except DecodeFailure:
            flips += 1
    return flips / total if total else float("nan")


def train(
    cfg: TrainConfig,
    real_source: RealSource | None = None,
    state: GanState | None = None,
    monitor_flips: int = 0,
    log: Callable[[str], None] | None = None,
) -> GanState:
    """Run (or resume) the adversarial loop; one history row per epoch.

    ``monitor_flips`` > 0 decodes that many generated samples at the end of
    each epoch and records the detail-stage flip rate (NaN when the
    resolution is too small for the decode oracle).
    """
    real_source = real_source or handmade_source(cfg.resolution)
    state = state or init_state(cfg)
    rng, r, b = state.rng, cfg.resolution, cfg.batch_size
    for epoch in range(state.epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        state.opt_g.lr = state.opt_d.lr = lr
        sums = np.zeros(3)
        for _ in range(cfg.steps_per_epoch):
            labels = sample_labels(rng, b, r)
            renders = render_batch(labels, r)
            z = rng.uniform(-1.0, 1.0, (b, cfg.n_z))
            real = real_source(rng, b)
            res = gan_step(state, real, z, renders)
            sums += (res.d_loss, res.g_loss, res.penalty)
        d_loss, g_loss, penalty = sums / cfg.steps_per_epoch
        row = dict(epoch=epoch, lr=lr, d_loss=d_loss, g_loss=g_loss, penalty=penalty,
                   detail_flip_rate=float("nan"))
        if monitor_flips:
            labels = sample_labels(rng, monitor_flips, r)
            z = rng.uniform(-1.0, 1.0, (monitor_flips, cfg.n_z))
            row["detail_flip_rate"] = _detail_flip_rate(state, labels, render_batch(labels, r), z)
        state.history.append(row)
        state.epoch = epoch + 1
        if log:
            log(f"epoch {epoch:3d} lr {lr:.2e} D {d_loss:.4f} G {g_loss:.4f} penalty {penalty:.4f}")
    return state


def generate(state: GanState, labels, rng: np.random.Generator, stages=diff_ops.STAGES) -> np.ndarray:
    """Images for ``labels`` from the trained generator, optionally only a stage prefix."""
    renders = render_batch(labels, state.cfg.resolution)
    z = rng.uniform(-1.0, 1.0, (len(labels), state.cfg.n_z))
    if tuple(stages) == diff_ops.STAGES:
        image, _, _ = state.gen.forward(z, renders)
        return image
    _, _, cache = state.gen.forward(z, renders)
    params = cache["tape"].clipped
    image, _, _ = diff_ops.compose(renders, clip=False, stages=tuple(stages), **params)
    return image


def score_filter(images, disc: Discriminator, quantile: float = 0.02):
    """Drop the lowest-scoring ``floor(quantile * n)`` images.

    Returns ``(kept_indices, scores)``; kept indices are in input order and
    number ``ceil((1 - quantile) * n)``.
    """
    if not 0 <= quantile <= 1:
        raise ValueError("quantile must lie in [0, 1]")
    scores = disc.score(images)
    n = len(scores)
    n_keep = int(math.ceil(round((1 - quantile) * n, 9)))
    order = np.argsort(scores, kind="stable")
    kept = np.sort(order[n - n_keep :])
    return kept, scores


# -- persistence ----------------------------------------------------------------

def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    fields = ["epoch", "lr", "d_loss", "g_loss", "penalty", "detail_flip_rate"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: row[k] for k in fields})
    return buf.getvalue()


def save_checkpoint(path: str | Path, state: GanState) -> None:
    arrays = {}
    for prefix, params in (("gen", state.gen.params), ("disc", state.disc.params)):
        for k, v in params.items():
            arrays[f"{prefix}/{k}"] = v
    for prefix, opt in (("adam_g", state.opt_g), ("adam_d", state.opt_d)):
        for k in opt.m:
            arrays[f"{prefix}.m/{k}"] = opt.m[k]
            arrays[f"{prefix}.v/{k}"] = opt.v[k]
    cfg = asdict(state.cfg)
    meta = dict(
        version=CHECKPOINT_VERSION,
        config=cfg,
        step=state.step,
        epoch=state.epoch,
        adam_steps=[state.opt_g.step, state.opt_d.step],
        rng=state.rng.bit_generator.state,
        history=state.history,
    )
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path, cfg: TrainConfig | None = None) -> GanState:
    """Restore a training state; ``cfg`` may extend ``epochs`` for resuming."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        saved = meta["config"]
        saved["decay_epochs"] = tuple(saved["decay_epochs"])
        saved["disc_channels"] = tuple(saved["disc_channels"])
        cfg = cfg or TrainConfig(**saved)
        state = init_state(cfg)
        for key in data.files:
            if key == "__meta__":
                continue
            group, name = key.split("/", 1)
            if group == "gen":
                state.gen.params[name] = data[key].copy()
            elif group == "disc":
                state.disc.params[name] = data[key].copy()
            else:
                opt = state.opt_g if group.startswith("adam_g") else state.opt_d
                (opt.m if group.endswith(".m") else opt.v)[name] = data[key].copy()
    state.step, state.epoch = meta["step"], meta["epoch"]
    state.opt_g.step, state.opt_d.step = meta["adam_steps"]
    state.rng.bit_generator.state = meta["rng"]
    state.history = meta["history"]
    return state
