import numpy as np
import pytest

from relightbake import kernels
from relightbake.scene import load_scene

py = kernels.backend("python")
try:
    cy = kernels.backend("cython")
    cyf = kernels.backend("cython", fast=True)
except ImportError:  # pragma: no cover
    cy = cyf = None

needs_c = pytest.mark.skipif(cy is None, reason="compiled backend not built")


def test_backend_names():
    assert kernels.BACKEND in ("python", "cython")
    with pytest.raises(ValueError):
        kernels.backend("fortran")


@needs_c
def test_scene_sdf_parity():
    s = load_scene("cornell-sdf")
    x = np.random.default_rng(0).uniform(-1.5, 1.5, (5000, 3))
    d0, i0 = py.scene_sdf(s.kinds, s.params, x)
    d1, i1 = cy.scene_sdf(s.kinds, s.params, x)
    np.testing.assert_allclose(d0, d1, atol=1e-12)
    np.testing.assert_array_equal(i0, i1)


@needs_c
def test_sphere_trace_parity():
    s = load_scene("spheres")
    g = np.random.default_rng(1)
    o = np.tile([0.0, 0.5, 3.5], (2000, 1))
    d = g.normal(size=(2000, 3)) * 0.2 + [0, -0.1, -1]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    a = py.sphere_trace(s.kinds, s.params, o, d, 0.0, 10.0, 1e-4, 256)
    b = cy.sphere_trace(s.kinds, s.params, o, d, 0.0, 10.0, 1e-4, 256)
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_allclose(a[0], b[0], atol=1e-9)
    np.testing.assert_array_equal(a[3], b[3])


def _tables(levels=4, t=256, f=2):
    return np.random.default_rng(2).normal(size=(levels, t, f)).astype(np.float32)


@needs_c
def test_hash_encode_and_scatter_parity():
    tables = _tables()
    res = np.array([3, 5, 16, 64])
    dense = np.array([1, 1, 0, 0], dtype=np.uint8)
    x = np.random.default_rng(3).random((3000, 3))
    f0, i0, w0 = py.hash_encode(x, tables, res, dense)
    f1, i1, w1 = cy.hash_encode(x, tables, res, dense)
    np.testing.assert_allclose(f0, f1, atol=1e-5)
    np.testing.assert_array_equal(i0, i1)
    g = np.random.default_rng(4).normal(size=f0.shape)
    np.testing.assert_allclose(py.hash_scatter(g, i0, w0, tables.shape), cy.hash_scatter(g, i1, w1, tables.shape),
                               atol=1e-9)


def test_hash_weights_partition_unity():
    tables = _tables()
    x = np.random.default_rng(5).random((500, 3))
    _, _, w = py.hash_encode(x, tables, np.array([3, 5, 16, 64]), np.array([1, 1, 0, 0], dtype=np.uint8))
    np.testing.assert_allclose(w.sum(axis=-1), 1.0)


def test_hash_scatter_is_adjoint():
    tables = _tables().astype(np.float64)
    res, dense = np.array([3, 5, 16, 64]), np.array([1, 1, 0, 0], dtype=np.uint8)
    x = np.random.default_rng(6).random((400, 3))
    f, i, w = py.hash_encode(x, tables, res, dense)
    g = np.random.default_rng(7).normal(size=f.shape)
    # <g, E t> == <E^T g, t>
    assert np.sum(g * f) == pytest.approx(np.sum(py.hash_scatter(g, i, w, tables.shape) * tables), rel=1e-10)


def _atrous_inputs(seed=0, h=24, w=20):
    g = np.random.default_rng(seed)
    color = g.random((h, w, 3))
    var = g.random((h, w)) * 0.1
    lum = color @ [0.2126, 0.7152, 0.0722]
    depth = 2.0 + g.random((h, w)) * 0.1
    n = g.normal(size=(h, w, 3)) * 0.1 + [0, 0, 1]
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    dgrad = g.random((h, w, 2)) * 0.05
    mask = (g.random((h, w)) > 0.1).astype(np.float64)
    return color, var, lum, depth, n, dgrad, mask


@needs_c
@pytest.mark.parametrize("stride", [1, 4])
def test_atrous_parity(stride):
    args = _atrous_inputs()
    a = py.atrous_pass(*args, stride, 1.0, 128.0, 4.0, 1e-6)
    b = cy.atrous_pass(*args, stride, 1.0, 128.0, 4.0, 1e-6)
    np.testing.assert_allclose(a[0], b[0], atol=1e-10)
    np.testing.assert_allclose(a[1], b[1], atol=1e-10)


@needs_c
def test_gelu_parity():
    x = np.linspace(-8, 8, 10001, dtype=np.float32)
    y0, c0 = py.gelu_cdf(x)
    y1, c1 = cyf.gelu_cdf(x)
    np.testing.assert_allclose(y0, np.asarray(y1).reshape(x.shape), atol=2e-6)
    g = np.ones_like(x)
    np.testing.assert_allclose(py.gelu_grad(x, c0, g), np.asarray(cyf.gelu_grad(x, c1, g)).reshape(x.shape),
                               atol=2e-5)


@needs_c
def test_tracer_infer_parity():
    g = np.random.default_rng(8)
    hid = 32
    prefix = g.normal(size=(50, hid)).astype(np.float32)
    wi = g.normal(size=(50, 7, 3)).astype(np.float32)
    w1d = g.normal(size=(3, hid)).astype(np.float32) * 0.3
    w2 = g.normal(size=(hid, hid)).astype(np.float32) * 0.2
    b2 = g.normal(size=hid).astype(np.float32)
    w3 = g.normal(size=(hid, 2)).astype(np.float32) * 0.2
    b3 = g.normal(size=2).astype(np.float32)
    a = py.tracer_infer(prefix, wi, w1d, w2, b2, w3, b3)
    b = np.asarray(cyf.tracer_infer(prefix, wi, w1d, w2, b2, w3, b3)).reshape(a.shape)
    np.testing.assert_allclose(a, b, atol=1e-4)


@needs_c
def test_conv_and_norm_parity():
    g = np.random.default_rng(9)
    x = g.normal(size=(2, 9, 11, 5)).astype(np.float32)
    wt = g.normal(size=(45, 6)).astype(np.float32)
    bias = g.normal(size=6).astype(np.float32)
    np.testing.assert_allclose(py.conv3x3_forward(x, wt, bias), cyf.conv3x3_forward(x, wt, bias), atol=1e-4)
    gy = g.normal(size=(2, 9, 11, 6)).astype(np.float32)
    for a, b in zip(py.conv3x3_backward(x, wt, gy), cyf.conv3x3_backward(x, wt, gy)):
        np.testing.assert_allclose(a, b, atol=1e-3)
    sc, sh = np.ones(5, np.float32) * 1.3, np.zeros(5, np.float32)
    fa = py.instance_norm_forward(x, sc, sh, 1e-5)
    fb = cyf.instance_norm_forward(x, sc, sh, 1e-5)
    np.testing.assert_allclose(fa[0], fb[0], atol=1e-5)
    gx = g.normal(size=x.shape).astype(np.float32)
    for a, b in zip(py.instance_norm_backward(gx, fa[1], fa[2], sc), cyf.instance_norm_backward(gx, fb[1], fb[2], sc)):
        np.testing.assert_allclose(a, b, atol=1e-3)
