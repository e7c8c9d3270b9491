import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relightbake import kernels
from relightbake.svgf import AuxBuffers, SvgfConfig, atrous_filter, denoise, depth_gradient, estimate_variance

H, W = 48, 48


def flat_aux(h=H, w=W, albedo=None):
    n = np.zeros((h, w, 3))
    n[..., 2] = 1.0
    depth = np.full((h, w), 2.0)
    return AuxBuffers(depth, n, depth_gradient(depth), np.ones((h, w)), albedo)


def test_config_validation():
    with pytest.raises(ValueError):
        SvgfConfig(iterations=0)
    with pytest.raises(ValueError):
        SvgfConfig(sigma_l=0)


def test_depth_gradient_constant_and_ramp():
    assert np.all(depth_gradient(np.full((5, 6), 3.0)) == 0)
    x = np.tile(np.arange(6.0), (5, 1))
    g = depth_gradient(x)
    np.testing.assert_allclose(g[..., 0], 1.0)
    np.testing.assert_allclose(g[..., 1], 0.0)


def test_depth_gradient_taylor_bound():
    y, x = np.mgrid[0:32, 0:32] * 0.1
    z = np.sin(x) + 0.5 * np.cos(y)
    g = depth_gradient(z)
    # forward difference vs analytic derivative: error <= max|f''| * h / 2 per pixel (h = 0.1)
    assert np.all(np.abs(g[:, :-1, 0] - 0.1 * np.cos(x[:, :-1])) <= 0.5 * 0.1 * 0.1 + 1e-12)
    assert np.all(np.abs(g[:-1, :, 1] + 0.1 * 0.5 * np.sin(y[:-1])) <= 0.5 * 0.5 * 0.1 * 0.1 + 1e-12)


def test_variance_constant_and_checkerboard():
    assert np.all(estimate_variance(np.full((20, 20, 3), 0.4)) == 0)
    y, x = np.mgrid[0:21, 0:21]
    cb = ((x + y) % 2).astype(np.float64)
    var = estimate_variance(np.repeat(cb[..., None], 3, -1) / (0.2126 + 0.7152 + 0.0722))
    # a 7x7 window holds 25 of one colour and 24 of the other
    expected = 25 * 24 / (49 * 48)
    np.testing.assert_allclose(var[3:-3, 3:-3], expected, rtol=1e-9)
    assert np.all(var >= 0)


def test_variance_matches_direct_window_oracle():
    lum = np.random.default_rng(0).random((12, 15))
    var = estimate_variance(None, lum=lum)
    for i, j in [(0, 0), (5, 7), (11, 14), (3, 0)]:
        win = lum[max(0, i - 3):i + 4, max(0, j - 3):j + 4]
        assert var[i, j] == pytest.approx(win.var(ddof=1), rel=1e-9)


def test_constant_frame_is_unchanged_exactly():
    frame = np.full((H, W, 3), 0.37)
    var = np.random.default_rng(1).random((H, W))
    out, _ = atrous_filter(frame, var, flat_aux())
    assert np.array_equal(out, frame)


def test_noise_variance_reduction():
    g = np.random.default_rng(2)
    frame = 0.5 + g.normal(scale=0.1, size=(64, 64, 3))
    out = denoise(frame, flat_aux(64, 64))
    core = (slice(16, -16), slice(16, -16))
    assert out[core].var() <= 0.25 * frame[core].var()


def test_normal_edge_preserved():
    aux = flat_aux()
    aux.normal[:, W // 2:] = [1.0, 0.0, 0.0]
    frame = np.zeros((H, W, 3))
    frame[:, W // 2:] = 1.0
    frame += np.random.default_rng(3).normal(scale=0.05, size=frame.shape)
    out = denoise(frame, aux)
    left = out[:, W // 2 - 1].mean()
    right = out[:, W // 2].mean()
    # the step of 1.0 survives: the pixels on each side move by at most 10% of it
    assert abs(left - 0.0) <= 0.1 and abs(right - 1.0) <= 0.1


def test_masked_pixels_pass_through():
    aux = flat_aux()
    aux.mask[:10] = 0.0
    frame = np.random.default_rng(4).random((H, W, 3))
    out = denoise(frame, aux)
    np.testing.assert_array_equal(out[:10], frame[:10])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_non_expansive(seed):
    g = np.random.default_rng(seed)
    frame = g.random((16, 16, 3))
    aux = flat_aux(16, 16)
    aux.normal = g.normal(size=(16, 16, 3)) * 0.2 + [0, 0, 1]
    aux.normal /= np.linalg.norm(aux.normal, axis=-1, keepdims=True)
    out = denoise(frame, aux, SvgfConfig(demodulate=False))
    for c in range(3):
        assert frame[..., c].min() - 1e-12 <= out[..., c].min()
        assert out[..., c].max() <= frame[..., c].max() + 1e-12


def test_demodulation_toggle():
    g = np.random.default_rng(5)
    albedo = g.random((H, W, 3)) * 0.8 + 0.1
    frame = albedo * (0.5 + g.normal(scale=0.05, size=(H, W, 3)))
    aux = flat_aux(albedo=albedo)
    a = denoise(frame, aux, SvgfConfig(demodulate=True))
    b = denoise(frame, aux, SvgfConfig(demodulate=False))
    # demodulated filtering keeps the albedo texture
    assert np.abs(a - 0.5 * albedo).mean() < np.abs(b - 0.5 * albedo).mean()


def test_backends_agree():
    try:
        cy = kernels.backend("cython")
    except ImportError:
        pytest.skip("compiled backend not built")
    g = np.random.default_rng(6)
    frame = g.random((32, 32, 3))
    var = estimate_variance(frame)
    aux = flat_aux(32, 32)
    a, _ = atrous_filter(frame, var, aux, backend=kernels.backend("python"))
    b, _ = atrous_filter(frame, var, aux, backend=cy)
    np.testing.assert_allclose(a, b, atol=1e-10)
