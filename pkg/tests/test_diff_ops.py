import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from rendersynth import diff_ops
from rendersynth.diff_ops import (ALPHA_CLIP, BACKGROUND_CLIP, DETAIL_CLIP, GAMMA, SCALE_CLIP, SHIFT_CLIP, ClipConfig,
                                  clip_with_penalty, clip_with_penalty_vjp, compose, compose_vjp, gaussian_blur,
                                  gaussian_blur_vjp, highpass, phi_bg, phi_blur, phi_blur_vjp, phi_detail,
                                  phi_lighting, resize, resize_vjp, vjp)
from rendersynth.tag_model import RenderOutput, TagLabel, decode_oracle, render

finite = st.floats(-3, 3, allow_nan=False)
img8 = arrays(np.float64, (8, 8), elements=st.floats(-1, 1))


# -- gaussian blur --------------------------------------------------------------

def test_kernel_normalized_and_radius():
    k = diff_ops.gaussian_kernel(2.0)
    assert len(k) == 13 and np.isclose(k.sum(), 1.0)
    assert np.allclose(k, k[::-1])


@pytest.mark.parametrize("sigma", [0.5, 2.0, 3.5, 4.0])
def test_blur_constant_fixed(sigma):
    x = np.full((16, 16), 0.37)
    np.testing.assert_allclose(gaussian_blur(x, sigma), x, atol=1e-15)


def test_blur_sigma_zero_identity(rng):
    x = rng.normal(size=(9, 7))
    assert np.array_equal(gaussian_blur(x, 0), x)


def test_blur_impulse_matches_2d_gaussian():
    x = np.zeros((64, 64))
    x[32, 32] = 1.0
    out = gaussian_blur(x, 2.0)
    # direct 2-D Gaussian on the truncated square window, normalized over it
    r = 6
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    g = np.exp(-(dx**2 + dy**2) / 8.0)
    g /= g.sum()
    oracle = np.zeros((64, 64))
    oracle[32 - r : 33 + r, 32 - r : 33 + r] = g
    np.testing.assert_allclose(out, oracle, atol=1e-6)
    assert np.abs(out - oracle).max() < 1e-15


@pytest.mark.parametrize("shape,sigma", [((64, 64), 2.0), ((16, 16), 3.5), ((8, 5), 4.0), ((3, 3), 1.0)])
def test_blur_matches_scipy_mirror(shape, sigma, rng):
    # scipy's "mirror" mode reflects without repeating the edge sample
    x = rng.normal(size=shape)
    k = diff_ops.gaussian_kernel(sigma)
    oracle = ndimage.correlate1d(ndimage.correlate1d(x, k, axis=0, mode="mirror"), k, axis=1, mode="mirror")
    np.testing.assert_allclose(gaussian_blur(x, sigma), oracle, atol=1e-12)


def test_blur_batched(rng):
    x = rng.normal(size=(3, 16, 16))
    np.testing.assert_allclose(gaussian_blur(x, 2)[1], gaussian_blur(x[1], 2), atol=1e-15)


def test_blur_adjoint(rng):
    x, y = rng.normal(size=(2, 12, 12))
    assert np.isclose(np.sum(gaussian_blur(x, 2.5) * y), np.sum(x * gaussian_blur_vjp(y, 2.5)))


def test_blur_negative_sigma():
    with pytest.raises(ValueError):
        gaussian_blur(np.zeros((4, 4)), -1)


# -- resize -------------------------------------------------------------------

@pytest.mark.parametrize("n_in,n_out", [(8, 64), (16, 64), (8, 16), (1, 8)])
def test_resize_constant_exact(n_in, n_out):
    x = np.full((n_in, n_in), 0.123456789)
    assert np.all(resize(x, n_out) == 0.123456789)


def test_resize_adjoint(rng):
    x = rng.normal(size=(8, 8))
    y = rng.normal(size=(32, 32))
    assert np.isclose(np.sum(resize(x, 32) * y), np.sum(x * resize_vjp(y, 8)))


# -- stages ---------------------------------------------------------------------

def test_phi_blur_endpoints(rng):
    x = rng.uniform(-1, 1, (16, 16))
    assert np.array_equal(phi_blur(x, 0.0), x)
    np.testing.assert_allclose(phi_blur(x, 1.0), gaussian_blur(x, 2.0), atol=1e-15)


def test_phi_blur_alpha_gradient_fd(rng):
    x = rng.uniform(-1, 1, (16, 16))
    u = rng.normal(size=x.shape)
    h = 1e-5
    fd = (np.sum(u * phi_blur(x, 0.5 + h)) - np.sum(u * phi_blur(x, 0.5 - h))) / (2 * h)
    _, ga = phi_blur_vjp(x, 0.5, u)
    assert abs(fd - ga) / abs(ga) < 1e-5


def test_phi_lighting_identity_and_scaling(rng):
    x = rng.uniform(-1, 1, (16, 16))
    one, zero = np.ones_like(x), np.zeros_like(x)
    np.testing.assert_allclose(phi_lighting(x, one, one, zero), x, rtol=0, atol=1e-12)
    np.testing.assert_allclose(phi_lighting(x, 0.1 * one, 0.1 * one, zero), 0.1 * x, atol=1e-15)


def test_phi_lighting_formula(rng):
    x = rng.uniform(-1, 1, (16, 16))
    sw, sb = rng.uniform(0.1, 1, (2, 16, 16))
    t = rng.uniform(-0.5, 0.5, (16, 16))
    w = (x > 0).astype(float)
    b = lambda v: gaussian_blur(v, 4.0)
    expect = x * b(sw) * w + x * b(sb) * (1 - w) + b(t)
    np.testing.assert_allclose(phi_lighting(x, sw, sb, t), expect, atol=1e-14)


def test_phi_bg(rng):
    x = rng.uniform(-1, 1, (16, 16))
    mask = (rng.random((16, 16)) < 0.5).astype(float)
    d = rng.uniform(-1, 1, (16, 16))
    out = phi_bg(x, mask, d)
    assert np.array_equal(out[mask == 0], x[mask == 0])
    assert np.array_equal(out[mask == 1], d[mask == 1])
    assert np.array_equal(phi_bg(x, mask, x), x)
    assert np.array_equal(phi_bg(x, np.zeros_like(x), d), x)
    with pytest.raises(ValueError):
        phi_bg(x, mask, np.zeros((8, 8)))


def test_phi_bg_gradient_is_masked(rng):
    mask = (rng.random((8, 8)) < 0.5).astype(float)
    u = rng.normal(size=(8, 8))
    g = vjp("phi_bg", {"bg_mask": mask}, u)
    assert np.array_equal(g["d"], u * mask)
    assert np.array_equal(g["x"], u * (1 - mask))


def test_highpass_kills_constants_and_zero():
    assert np.abs(highpass(np.full((16, 16), 1.7))).max() < 1e-13
    assert np.array_equal(highpass(np.zeros((16, 16))), np.zeros((16, 16)))


def test_highpass_sinusoid_attenuation():
    # period 4 along x; interior columns are far from every border effect
    cols = np.arange(160)
    s = np.tile(np.cos(np.pi * cols / 2), (8, 1))
    inner = slice(60, 100)
    peaks = np.abs(s[0, inner]) == 1
    g_hat = (gaussian_blur(s, 3.5)[0, inner] / s[0, inner])[peaks]
    ratio = (highpass(s)[0, inner] / s[0, inner])[peaks]
    np.testing.assert_allclose(ratio, (1 - g_hat) ** 3, rtol=1e-10)


def test_phi_detail(rng):
    x = rng.uniform(-1, 1, (16, 16))
    np.testing.assert_allclose(phi_detail(x, np.full_like(x, 1.5)), x, atol=1e-13)
    assert np.array_equal(phi_detail(x, np.zeros_like(x)), x)
    # not clamped
    d = rng.uniform(-2, 2, (16, 16))
    assert np.abs(phi_detail(x, d)).max() > 1


# -- clip layer -----------------------------------------------------------------

def test_clip_config_validation():
    with pytest.raises(ValueError):
        ClipConfig(1.0, 0.0)
    with pytest.raises(ValueError):
        ClipConfig(0.0, 1.0, gamma=0)
    assert GAMMA == 15


def test_param_clip_bounds():
    assert (ALPHA_CLIP.a, ALPHA_CLIP.b) == (0, 1)
    assert (SCALE_CLIP.a, SCALE_CLIP.b) == (0.10, 1)
    assert (SHIFT_CLIP.a, SHIFT_CLIP.b) == (-0.5, 0.5)
    assert (DETAIL_CLIP.a, DETAIL_CLIP.b) == (-2, 2)
    assert (BACKGROUND_CLIP.a, BACKGROUND_CLIP.b) == (-1, 1)


def test_clip_scalar_cases():
    cfg = ClipConfig(-0.5, 0.5)
    v, p = clip_with_penalty(np.array(1.5), cfg)
    assert v == 0.5 and p == 15.0
    v, p = clip_with_penalty(np.array(-2.5), cfg)
    assert v == -0.5 and p == 30.0
    inside = np.array([-0.5, 0.0, 0.5])
    v, p = clip_with_penalty(inside, cfg)
    assert np.array_equal(v, inside) and p == 0.0


@settings(max_examples=200, deadline=None)
@given(v=arrays(np.float64, 6, elements=finite), a=st.floats(-1, 0), width=st.floats(0.1, 2))
def test_clip_properties(v, a, width):
    cfg = ClipConfig(a, a + width)
    out, pen = clip_with_penalty(v, cfg)
    assert np.all((out >= cfg.a) & (out <= cfg.b))
    inside = np.all((v >= cfg.a) & (v <= cfg.b))
    assert (pen == 0) == inside
    dist = np.maximum(cfg.a - v, 0) + np.maximum(v - cfg.b, 0)
    assert np.isclose(pen, 15 * dist.sum())
    g = clip_with_penalty_vjp(v, cfg, np.zeros_like(v), 1.0)
    assert set(np.abs(g[(v < cfg.a) | (v > cfg.b)]).tolist()) <= {15.0}
    assert np.all(g[(v >= cfg.a) & (v <= cfg.b)] == 0)


@settings(max_examples=50, deadline=None)
@given(v0=st.floats(1.5, 5), step=st.floats(0.01, 1))
def test_penalty_slope_exactly_gamma(v0, step):
    cfg = ClipConfig(0.0, 1.0)
    _, p0 = clip_with_penalty(np.array(v0), cfg)
    _, p1 = clip_with_penalty(np.array(v0 + step), cfg)
    assert np.isclose((p1 - p0) / step, 15.0, rtol=1e-9)


def test_clip_straight_through(rng):
    cfg = ClipConfig(0.0, 1.0)
    v = np.array([-0.5, 0.2, 0.7, 1.4])
    g = clip_with_penalty_vjp(v, cfg, np.ones(4), 0.0)
    assert np.array_equal(g, [0, 1, 1, 0])


# -- composition ----------------------------------------------------------------

def _identity_params(x):
    return dict(alpha=0.0, s_w=np.ones_like(x), s_b=np.ones_like(x), t=np.zeros_like(x), bg=x,
                detail=np.full_like(x, 0.3))


def test_compose_identity():
    out = render(TagLabel.from_string("100110100010", yaw=0.7))
    image, pen, _ = compose(out, **_identity_params(out.image))
    assert pen == 0
    np.testing.assert_allclose(image, out.image, atol=1e-12)


def test_compose_matches_manual_chain(rng):
    out = render(TagLabel.from_string("101010101010", pitch=0.2), 32)
    p = dict(alpha=0.4, s_w=rng.uniform(0.1, 1, (32, 32)), s_b=rng.uniform(0.1, 1, (32, 32)),
             t=rng.uniform(-0.5, 0.5, (32, 32)), bg=rng.uniform(-1, 1, (32, 32)), detail=rng.uniform(-2, 2, (32, 32)))
    x = phi_blur(out.image, p["alpha"])
    x = phi_lighting(x, p["s_w"], p["s_b"], p["t"])
    x = phi_bg(x, out.bg_mask, p["bg"])
    x = phi_detail(x, p["detail"])
    image, pen, _ = compose(out, **p)
    assert pen == 0 and image.shape == out.image.shape
    np.testing.assert_allclose(image, x, atol=1e-14)


def test_compose_clips_and_penalizes():
    out = render(TagLabel.centered([0] * 12, 16), 16)
    x = out.image
    p = _identity_params(x)
    p["alpha"] = 1.5
    image, pen, tape = compose(out, stages=("blur",), **p)
    assert pen == 7.5
    assert tape.clipped["alpha"] == 1.0
    np.testing.assert_allclose(image, gaussian_blur(x, 2.0), atol=1e-12)


def test_compose_errors():
    out = render(TagLabel.centered([0] * 12, 16), 16)
    with pytest.raises(ValueError):
        compose(out, alpha=0.2, stages=("blur", "sharpen"))
    with pytest.raises(ValueError):
        compose(out, stages=("blur",))


def test_compose_vjp_fd_8x8(rng):
    # composed gradient w.r.t. every parameter matches central differences
    out = render(TagLabel.centered([1, 0] * 6, 16), 16)
    small = RenderOutput(resize(out.image, 8), (resize(out.bg_mask, 8) > 0.5).astype(float), resize(out.depth, 8))
    p = dict(alpha=0.3, s_w=rng.uniform(0, 1.2, (8, 8)), s_b=rng.uniform(0, 1.2, (8, 8)),
             t=rng.uniform(-0.7, 0.7, (8, 8)), bg=rng.uniform(-1.2, 1.2, (8, 8)),
             detail=rng.uniform(-2.5, 2.5, (8, 8)))
    u = rng.normal(size=(8, 8))

    def loss(**kw):
        img, pen, _ = compose(small, **kw)
        return np.sum(u * img) + pen

    _, _, tape = compose(small, **p)
    grads = compose_vjp(tape, u, 1.0)
    h = 1e-5
    for name, value in p.items():
        v = rng.normal(size=np.shape(value))
        lp = loss(**{**p, name: value + h * v})
        lm = loss(**{**p, name: value - h * v})
        fd = (lp - lm) / (2 * h)
        an = np.sum(grads[name] * v)
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-8), name


def test_vjp_dispatch_errors():
    with pytest.raises(KeyError):
        vjp("sharpen", {}, np.zeros((4, 4)))
    with pytest.raises(ValueError):
        vjp("phi_blur", {"x": np.zeros((4, 4))}, np.zeros((4, 4)))


@settings(max_examples=30, deadline=None)
@given(x=img8, alpha=st.floats(0, 1))
def test_phi_blur_vjp_adjoint_property(x, alpha):
    u = np.random.default_rng(0).normal(size=(8, 8))
    dx = np.random.default_rng(1).normal(size=(8, 8))
    gx, _ = phi_blur_vjp(x, alpha, u)
    # phi_blur is linear in x
    assert np.isclose(np.sum(u * (phi_blur(x + dx, alpha) - phi_blur(x, alpha))), np.sum(gx * dx))


# -- label preservation of the bounded stages (quick version) ------------------

def test_bounded_stages_preserve_labels_small_sweep(rng):
    from rendersynth.tag_model import sample_labels
    for label in sample_labels(rng, 60, 64):
        out = render(label)
        truth = decode_oracle(out.image, label)
        p = dict(alpha=rng.uniform(), s_w=rng.uniform(0.1, 1, (64, 64)), s_b=rng.uniform(0.1, 1, (64, 64)),
                 t=rng.uniform(-0.5, 0.5, (64, 64)), bg=rng.uniform(-1, 1, (64, 64)))
        image, _, _ = compose(out, stages=("blur", "lighting", "background"), **p)
        assert np.array_equal(decode_oracle(image, label), truth)
