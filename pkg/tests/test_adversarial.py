import dataclasses
import math

import numpy as np
import pytest

from rendersynth import adversarial, diff_ops
from rendersynth.adversarial import (Discriminator, Generator, TrainConfig, discriminator_forward, gan_step,
                                     generate, generator_forward, handmade_source, history_csv, init_state,
                                     load_checkpoint, render_batch, save_checkpoint, score_filter, train)
from rendersynth.pyramid_aug import HM_LI
from rendersynth.tag_model import TagLabel, decode_oracle, sample_labels

def same_history(a, b):
    return len(a) == len(b) and all(
        x.keys() == y.keys() and all(x[k] == y[k] or (x[k] != x[k] and y[k] != y[k]) for k in x)
        for x, y in zip(a, b)
    )


TINY = TrainConfig(resolution=16, batch_size=8, steps_per_epoch=3, epochs=2, n_z=8, hidden=16)


def test_config_validation_and_schedule():
    cfg = TrainConfig()
    assert cfg.lr == 2e-4 and cfg.decay_epochs[:2] == (20, 25) and cfg.decay_factor == 0.25
    assert cfg.lr_at(0) == cfg.lr_at(19) == 2e-4
    assert cfg.lr_at(20) == pytest.approx(5e-5, rel=1e-15)
    assert cfg.lr_at(25) == pytest.approx(1.25e-5, rel=1e-15)
    with pytest.raises(ValueError):
        TrainConfig(resolution=24)
    with pytest.raises(ValueError):
        TrainConfig(decay_epochs=(25, 20))
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_identity_initialized_generator_returns_render(rng):
    gen = Generator(TINY, rng, head_init_std=0.0)
    labels = sample_labels(rng, 4, 16)
    z = rng.uniform(-1, 1, (4, TINY.n_z))
    image, penalty, _ = generator_forward(gen, z, labels)
    assert penalty == 0
    np.testing.assert_allclose(image, render_batch(labels, 16).image, atol=1e-12)


def test_generator_deterministic_and_bounded(rng):
    gen = init_state(dataclasses.replace(TINY, head_init_std=0.5, detail_init_std=0.5)).gen
    labels = sample_labels(rng, 3, 16)
    renders = render_batch(labels, 16)
    z = rng.uniform(-1, 1, (3, TINY.n_z))
    a, _, _ = gen.forward(z, renders)
    b, _, _ = gen.forward(z, renders)
    assert np.array_equal(a, b)
    params = gen.stage_params(z, renders)
    for name, v in params.items():
        clip = diff_ops.PARAM_CLIPS[name]
        assert v.min() >= clip.a and v.max() <= clip.b


def test_generator_latent_gradient_fd(rng):
    cfg = dataclasses.replace(TINY, head_init_std=0.3, detail_init_std=0.3)
    gen = init_state(cfg).gen
    renders = render_batch(sample_labels(rng, 2, 16), 16)
    z = rng.uniform(-1, 1, (2, cfg.n_z))
    image, _, cache = gen.forward(z, renders)
    u = rng.normal(size=image.shape)
    _, gz = gen.backward(cache, u, 0.5)

    def loss(zz):
        img, pen, _ = gen.forward(zz, renders)
        return np.sum(u * img) + 0.5 * pen

    h = 1e-5
    v = rng.normal(size=z.shape)
    fd = (loss(z + h * v) - loss(z - h * v)) / (2 * h)
    assert abs(fd - np.sum(gz * v)) <= 1e-4 * abs(fd)


def test_generator_loss_parameter_gradient_fd(rng):
    # full generator loss: non-saturating term through D plus the clip penalty
    cfg = dataclasses.replace(TINY, head_init_std=0.3, detail_init_std=0.3)
    state = init_state(cfg)
    gen, disc = state.gen, state.disc
    renders = render_batch(sample_labels(rng, 3, 16), 16)
    z = rng.uniform(-1, 1, (3, cfg.n_z))

    def g_loss():
        fake, pen, _ = gen.forward(z, renders)
        logits, _ = disc.forward(fake)
        return np.mean(np.logaddexp(0, -logits)) + pen / 3

    fake, pen, gcache = gen.forward(z, renders)
    logits, dcache = disc.forward(fake)
    _, g_img = disc.backward(dcache, -adversarial.nn.sigmoid(-logits) / 3)
    grads, _ = gen.backward(gcache, g_img, 1 / 3)
    h = 1e-6
    for name in gen.params:
        v = rng.normal(size=gen.params[name].shape)
        base = gen.params[name].copy()
        gen.params[name] = base + h * v
        lp = g_loss()
        gen.params[name] = base - h * v
        lm = g_loss()
        gen.params[name] = base
        fd = (lp - lm) / (2 * h)
        an = np.sum(grads[name] * v)
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-8), name


def test_discriminator_outputs(rng):
    disc = Discriminator(TINY, rng)
    x = rng.normal(size=(5, 16, 16))
    s = discriminator_forward(disc, x)
    assert s.shape == (5,) and np.all((s > 0) & (s < 1))
    assert discriminator_forward(disc, x[0]).shape == (1,)
    assert np.all(np.isfinite(disc.score(100 * x)))
    disc.params["fc.W"][:] = 0
    disc.params["fc.b"][:] = 0
    assert np.all(disc.score(x) == 0.5)


def test_discriminator_pools_large_inputs(rng):
    disc = Discriminator(dataclasses.replace(TINY, resolution=64), rng)
    assert disc.input_res == 32 and disc.pool == 2
    assert disc.score(rng.normal(size=(2, 64, 64))).shape == (2,)


def test_gan_step_lr_zero_bit_identical(rng):
    state = init_state(TINY)
    state.opt_g.lr = state.opt_d.lr = 0.0
    before_g = {k: v.copy() for k, v in state.gen.params.items()}
    before_d = {k: v.copy() for k, v in state.disc.params.items()}
    labels = sample_labels(rng, 8, 16)
    res = gan_step(state, rng.normal(size=(8, 16, 16)), rng.uniform(-1, 1, (8, TINY.n_z)), render_batch(labels, 16))
    assert all(np.array_equal(before_g[k], state.gen.params[k]) for k in before_g)
    assert all(np.array_equal(before_d[k], state.disc.params[k]) for k in before_d)
    assert np.isfinite([res.d_loss, res.g_loss, res.penalty]).all() and state.step == 1


def test_gan_step_shape_mismatch(rng):
    state = init_state(TINY)
    labels = sample_labels(rng, 4, 16)
    with pytest.raises(ValueError):
        gan_step(state, np.zeros((4, 32, 32)), np.zeros((4, TINY.n_z)), render_batch(labels, 16))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gan_step_nonfinite_aborts(rng):
    state = init_state(TINY)
    labels = sample_labels(rng, 4, 16)
    real = np.full((4, 16, 16), np.nan)
    with pytest.raises(FloatingPointError):
        gan_step(state, real, np.zeros((4, TINY.n_z)), render_batch(labels, 16))


def test_frozen_generator_discriminator_learns(rng):
    # real: bright noise; fake: the (frozen) generator output on clean renders
    state = init_state(dataclasses.replace(TINY, lr=1e-3))
    labels = sample_labels(rng, 16, 16)
    renders = render_batch(labels, 16)
    z = rng.uniform(-1, 1, (16, TINY.n_z))
    real = 0.8 + 0.1 * rng.normal(size=(16, 16, 16))
    before = {k: v.copy() for k, v in state.gen.params.items()}
    losses = [gan_step(state, real, z, renders, update_generator=False).d_loss for _ in range(100)]
    assert all(np.array_equal(before[k], state.gen.params[k]) for k in before)
    assert losses[-1] < losses[0]
    assert np.all(np.diff(losses) < 0)


def test_penalty_pulls_head_back_in_bounds(rng):
    state = init_state(dataclasses.replace(TINY, lr=1e-2))
    state.gen.params["blur.out.b"][:] = 2.0  # alpha far above its bound 1
    labels = sample_labels(rng, 8, 16)
    renders = render_batch(labels, 16)
    penalties, offsets = [], []
    for _ in range(50):
        z = rng.uniform(-1, 1, (8, TINY.n_z))
        penalties.append(gan_step(state, rng.normal(size=(8, 16, 16)), z, renders).penalty)
        offsets.append(state.gen.params["blur.out.b"][0])
    assert np.all(np.diff(offsets) < 0)
    assert penalties[-1] < penalties[0]


def test_train_smoke_and_determinism():
    cfg = dataclasses.replace(TINY, epochs=1)
    a = train(cfg)
    b = train(cfg)
    assert len(a.history) == 1
    row = a.history[0]
    assert all(np.isfinite(row[k]) for k in ("d_loss", "g_loss", "penalty"))
    assert same_history(a.history, b.history)
    assert a.step == cfg.steps_per_epoch


def test_train_records_detail_flip_rate():
    cfg = dataclasses.replace(TINY, resolution=32, epochs=1, steps_per_epoch=1)
    state = train(cfg, monitor_flips=8)
    assert 0 <= state.history[0]["detail_flip_rate"] <= 1


def test_checkpoint_round_trip_and_resume(tmp_path):
    cfg = TINY
    full = train(cfg)
    half = train(dataclasses.replace(cfg, epochs=1))
    save_checkpoint(tmp_path / "ck.npz", half)
    resumed = load_checkpoint(tmp_path / "ck.npz", cfg)
    assert resumed.step == half.step and resumed.epoch == 1
    resumed = train(cfg, state=resumed)
    assert resumed.step == full.step
    assert same_history(resumed.history, full.history)
    for k in full.gen.params:
        assert np.array_equal(full.gen.params[k], resumed.gen.params[k])


def test_checkpoint_version_check(tmp_path):
    state = init_state(TINY)
    save_checkpoint(tmp_path / "ck.npz", state)
    data = dict(np.load(tmp_path / "ck.npz"))
    import json
    meta = json.loads(bytes(data["__meta__"]).decode())
    meta["version"] = 99
    data["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "bad.npz", **data)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.npz")


def test_history_csv_one_row_per_epoch():
    state = train(TINY)
    lines = history_csv(state.history).strip().splitlines()
    assert lines[0].startswith("epoch,lr,d_loss") and len(lines) == 1 + TINY.epochs


@pytest.mark.parametrize("q", [0.0, 0.02, 0.1, 0.5, 1.0])
def test_score_filter_sizes(q, rng):
    disc = Discriminator(TINY, rng)
    images = rng.normal(size=(37, 16, 16))
    kept, scores = score_filter(images, disc, q)
    assert len(kept) == math.ceil(round((1 - q) * 37, 9))
    assert np.all(np.diff(kept) > 0)
    if len(kept) and len(kept) < 37:
        dropped = np.setdiff1d(np.arange(37), kept)
        assert scores[kept].min() >= scores[dropped].max()
    with pytest.raises(ValueError):
        score_filter(images, disc, 1.5)


def test_handmade_source_and_generate(rng):
    src = handmade_source(16)
    assert src(rng, 3).shape == (3, 16, 16)
    with pytest.raises(ValueError):
        handmade_source(16, HM_LI)
    state = init_state(TINY)
    labels = sample_labels(rng, 2, 16)
    full = generate(state, labels, np.random.default_rng(0))
    again = generate(state, labels, np.random.default_rng(0), stages=diff_ops.STAGES)
    assert np.array_equal(full, again)
    blur_only = generate(state, labels, np.random.default_rng(0), stages=("blur",))
    assert blur_only.shape == (2, 16, 16)


def test_bounded_stages_preserve_labels_after_training():
    cfg = dataclasses.replace(TINY, resolution=32, epochs=1, steps_per_epoch=5, lr=1e-2)
    state = train(cfg)
    rng = np.random.default_rng(9)
    labels = [l for l in sample_labels(rng, 40, 32) if l.scale > 0.95 and abs(l.pitch) < 0.3 and abs(l.roll) < 0.3]
    images = generate(state, labels, rng, stages=("blur", "lighting", "background"))
    for label, image in zip(labels, images):
        assert np.array_equal(decode_oracle(image, label), label.bits_array())
