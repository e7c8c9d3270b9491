import math

import numpy as np
import pytest

from relightbake.geom import RngStream
from relightbake.scene import (FAR, NEAR, Camera, GBuffer, angular_distance, load_scene, parse_scene,
                               sample_hemisphere_pose, sphere_trace, trace_gbuffer, trace_rays, visibility_depth)

UNIT_SPHERE = """
[sphere]
center = 0 0 0
radius = 1
albedo = 0.5 0.4 0.3
roughness = 0.2
"""


def test_parse_and_bounds():
    s = parse_scene(UNIT_SPHERE)
    assert s.sdf(np.array([0.0, 2.0, 0.0])) == pytest.approx(1.0)
    assert np.all(s.aabb_min < -1) and np.all(s.aabb_max > 1)
    a, r = s.material_at(np.array([[1.0, 0, 0]]))
    np.testing.assert_allclose(a, [[0.5, 0.4, 0.3]])
    assert r[0] == 0.2


@pytest.mark.parametrize("text", [
    "[sphere]\ncenter = 0 0 0\nradius = -1",
    "[plane]\nnormal = 0 1 0",
    "[blob]\nx = 1",
    "radius = 1",
    "[scene]\naabb_min = 0 0 0\naabb_max = 0.5 0.5 0.5\n" + UNIT_SPHERE,
])
def test_parse_errors(text):
    with pytest.raises(ValueError):
        parse_scene(text)


def test_missing_scene_file():
    with pytest.raises(FileNotFoundError):
        load_scene("/nonexistent/x.scene")


def test_sdf_is_one_lipschitz(cornell):
    g = np.random.default_rng(0)
    a = g.uniform(-1, 1, (4000, 3))
    b = a + g.normal(size=a.shape) * 0.05
    ratio = np.abs(cornell.sdf(a) - cornell.sdf(b)) / np.linalg.norm(a - b, axis=1)
    assert ratio.max() <= 1.0 + 1e-9


def test_trace_hits_analytic_sphere():
    s = parse_scene(UNIT_SPHERE)
    r = sphere_trace(s, [0.0, 0.0, 5.0], [0.0, 0.0, -1.0])
    assert r.hit and r.t == pytest.approx(4.0, abs=2e-4)
    np.testing.assert_allclose(r.n, [0, 0, 1], atol=1e-6)
    assert not sphere_trace(s, [0.0, 3.0, 5.0], [0.0, 0.0, -1.0]).hit


def test_trace_rays_random_against_quadratic():
    s = parse_scene(UNIT_SPHERE)
    g = np.random.default_rng(1)
    o = g.normal(size=(500, 3))
    o = 3 * o / np.linalg.norm(o, axis=1, keepdims=True)
    d = -o / 3 + g.normal(size=o.shape) * 0.2
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = trace_rays(s, o, d, 0.0, 10.0)
    b = np.einsum("ij,ij->i", o, d)
    disc = b * b - (np.einsum("ij,ij->i", o, o) - 1)
    exact = disc > 1e-6
    np.testing.assert_array_equal(r.hit[exact | (disc < -1e-3)], exact[exact | (disc < -1e-3)])
    t = -b - np.sqrt(np.maximum(disc, 0))
    np.testing.assert_allclose(r.t[exact & r.hit], t[exact & r.hit], atol=1e-3)


def test_visibility_depth_occluder_pair(occluder_pair):
    # point on the top of the lower sphere, looking up at the other sphere 1.0 away
    x = np.array([[0.0, 1.0, 0.0]])
    up = visibility_depth(occluder_pair, x, np.array([[0.0, 1.0, 0.0]]))
    assert up.v[0] == 0.0 and up.t[0] == pytest.approx(1.0, abs=2e-4)
    side = visibility_depth(occluder_pair, x, np.array([[1.0, 0.0, 0.0]]))
    assert side.v[0] == 1.0 and side.t[0] == FAR


def test_visibility_depth_range(cornell):
    g = np.random.default_rng(2)
    x = g.uniform(-0.5, 0.5, (200, 3))
    wi = g.normal(size=(200, 3))
    wi /= np.linalg.norm(wi, axis=1, keepdims=True)
    s = visibility_depth(cornell, x, wi)
    assert np.all((s.t >= NEAR) & (s.t <= FAR))
    assert np.all(s.t[s.v == 1.0] == FAR)


def test_camera_center_ray_and_dict():
    cam = Camera([0, 0, 4], [0, 0, 0], resolution=(4, 2))
    o, d = cam.rays()
    assert d.shape == (2, 4, 3)
    np.testing.assert_allclose(d.mean(axis=(0, 1)) / np.linalg.norm(d.mean(axis=(0, 1))), [0, 0, -1], atol=1e-12)
    # row 0 looks up
    assert d[0, 0, 1] > 0 > d[1, 0, 1]
    back = Camera.from_dict(cam.to_dict())
    np.testing.assert_array_equal(back.rays()[1], d)
    with pytest.raises(ValueError):
        Camera([0, 0, 1], [0, 0, 0], vfov=0)
    with pytest.raises(ValueError):
        Camera([0, 1, 0], [0, 0, 0]).frame()


def test_gbuffer_round_trip(tmp_path, spheres):
    cam = Camera([0, 0.5, 3.5], [0, 0, 0], resolution=(24, 16))
    gb = trace_gbuffer(spheres, cam)
    assert gb.shape == (16, 24)
    assert 0 < gb.mask.mean() < 1
    np.testing.assert_allclose(np.linalg.norm(gb.normal[gb.mask > 0], axis=-1), 1.0, atol=1e-6)
    assert np.all(gb.normal[gb.mask == 0] == 0)
    assert np.all(gb.coord >= spheres.aabb_min - 1e-9) and np.all(gb.coord <= spheres.aabb_max + 1e-9)
    gb.save(tmp_path / "g")
    back = GBuffer.load(tmp_path / "g")
    np.testing.assert_allclose(back.albedo, gb.albedo, atol=1e-6)
    np.testing.assert_array_equal(back.mask, gb.mask)


def test_pose_sampling_respects_elevation_and_rejects():
    rng = RngStream(5)
    poses = []
    for _ in range(50):
        poses.append(sample_hemisphere_pose(3.5, (5, 75), rng, reject=poses, min_angle=5.0))
    for p in poses:
        d = p.position / np.linalg.norm(p.position)
        el = math.degrees(math.asin(d[1]))
        assert 5 - 1e-9 <= el <= 75 + 1e-9
        assert np.linalg.norm(p.position) == pytest.approx(3.5)
    for i in range(len(poses)):
        for j in range(i):
            a = poses[i].position / 3.5
            b = poses[j].position / 3.5
            assert angular_distance(a, b) >= 5.0
    with pytest.raises(ValueError):
        sample_hemisphere_pose(-1, (5, 75), rng)
