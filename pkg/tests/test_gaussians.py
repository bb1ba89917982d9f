import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatnav.errors import DegenerateCovarianceError, SceneFormatError
from splatnav.gaussians import (CameraModel, GaussianPrimitive, GaussianScene, axis_angle_quat,
                                covariance_of, density_at, load_scene, parse_scene,
                                plane_frame_of, project_mean, quat_to_rotmat, save_scene)

IDQ = (1.0, 0.0, 0.0, 0.0)


def prim(mean=(0, 0, 0), quat=IDQ, scales=(1, 1, 1), opacity=1.0, rgb=(0.5, 0.5, 0.5)):
    return GaussianPrimitive(mean, quat, scales, opacity, rgb)


def random_prim(rng):
    q = rng.normal(size=4)
    return prim(rng.normal(size=3), q / np.linalg.norm(q), rng.uniform(0.05, 2.0, 3), rng.uniform())


def test_density_examples():
    g = prim(mean=(1, 2, 3))
    assert density_at(g, (1, 2, 3)) == 1.0
    assert density_at(prim(), (1, 0, 0)) == pytest.approx(math.exp(-0.5), abs=1e-12)
    g = prim(scales=(0.5, 2.0, 1.0))
    assert density_at(g, (1.5, 0, 0)) == pytest.approx(math.exp(-4.5), abs=1e-12)


def test_density_rejects_degenerate_scale():
    with pytest.raises(DegenerateCovarianceError):
        density_at(prim(scales=(1, 1, 1e-7)), (0, 0, 0))


def test_covariance_examples():
    a, b, c = 0.3, 0.7, 1.1
    np.testing.assert_allclose(covariance_of(prim(scales=(a, b, c))), np.diag([a * a, b * b, c * c]), atol=1e-15)
    g = prim(quat=axis_angle_quat((0, 0, 1), math.pi / 2), scales=(a, b, c))
    R = quat_to_rotmat(g.quat)
    S = np.diag(g.scales)
    brute = R @ S @ S.T @ R.T
    cov = covariance_of(g)
    np.testing.assert_allclose(cov, brute, atol=1e-14)
    np.testing.assert_allclose(cov, np.diag([b * b, a * a, c * c]), atol=1e-14)
    assert np.array_equal(cov, cov.T)


def test_plane_frame_examples():
    f = plane_frame_of(prim(scales=(1, 1, 0.01)))
    np.testing.assert_allclose(f.normal, (0, 0, 1))
    f = plane_frame_of(prim(mean=(2, 0, 0), scales=(0.01, 1, 1)))
    np.testing.assert_allclose(f.normal, (1, 0, 0))
    assert f.offset == pytest.approx(2.0)
    q = axis_angle_quat((1, 1, 0), 0.7)
    f = plane_frame_of(prim(quat=q, scales=(0.5, 0.5, 0.5)))
    np.testing.assert_allclose(f.normal, quat_to_rotmat(q)[:, 0])


def test_project_mean_examples():
    cam = CameraModel(np.eye(3), np.zeros(3), 32, 32, 32, 32, 64, 64)
    px, depth = project_mean(prim(mean=(0, 0, 2)), cam)
    np.testing.assert_allclose(px, (32, 32))
    assert depth == 2
    px, depth = project_mean(prim(mean=(1, 0, 2)), cam)
    np.testing.assert_allclose(px, (48, 32))
    assert project_mean(prim(mean=(0, 0, -1)), cam) is None


def test_primitive_validation():
    with pytest.raises(ValueError):
        prim(scales=(1, 0, 1))
    with pytest.raises(ValueError):
        prim(quat=(1, 0.1, 0, 0))
    with pytest.raises(ValueError):
        prim(opacity=1.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_invariance_and_peak(seed):
    rng = np.random.default_rng(seed)
    g = random_prim(rng)
    x = g.mean + rng.normal(size=3)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    R = quat_to_rotmat(q)
    t = rng.normal(size=3)
    scene = GaussianScene.from_primitives([g]).transformed(R, t)
    g2 = scene.primitives()[0]
    assert density_at(g2, R @ x + t) == pytest.approx(density_at(g, x), rel=1e-9, abs=1e-300)
    assert density_at(g, x) < 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_covariance_eigenvalues_and_normal(seed):
    rng = np.random.default_rng(seed)
    g = random_prim(rng)
    eig = np.sort(np.linalg.eigvalsh(covariance_of(g)))
    np.testing.assert_allclose(eig, np.sort(np.asarray(g.scales) ** 2), rtol=1e-5)
    f = plane_frame_of(g)
    assert abs(np.linalg.norm(f.normal) - 1) < 1e-6
    R = quat_to_rotmat(g.quat)
    for k in np.argsort(g.scales, kind="stable")[1:]:
        assert abs(R[:, k] @ f.normal) < 1e-6


def test_scene_json_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    scene = GaussianScene.from_primitives([random_prim(rng) for _ in range(5)])
    path = tmp_path / "scene.json"
    save_scene(scene, path)
    back = load_scene(path)
    np.testing.assert_array_equal(back.means, scene.means)
    np.testing.assert_array_equal(back.rgb, scene.rgb)


@pytest.mark.parametrize("bad", ["NaN", "Infinity", "-Infinity"])
def test_scene_parser_rejects_non_finite(bad):
    text = f'[{{"mean": [0, 0, {bad}], "quat": [1, 0, 0, 0], "scales": [1, 1, 1], "opacity": 1, "rgb": [1, 1, 1]}}]'
    with pytest.raises(SceneFormatError):
        parse_scene(text)


def test_look_at_is_orthonormal_and_faces_target():
    cam = CameraModel.look_at([1, 2, 3], [4, 0, 3])
    px, depth = project_mean(prim(mean=(4, 0, 3)), cam)
    np.testing.assert_allclose(px, (cam.cx, cam.cy), atol=1e-9)
    assert depth == pytest.approx(math.sqrt(13))
    d = CameraModel.from_dict(cam.to_dict())
    np.testing.assert_array_equal(d.rotation, cam.rotation)
