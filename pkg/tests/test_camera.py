import numpy as np
import pytest

from sssplat.camera import (Camera, Correspondence, back_project, bilinear_sample,
                            load_cameras, look_at_camera, project, reproject,
                            save_cameras, OUT_OF_FRAME, OUTSIDE_SILHOUETTE, INVALID_DEPTH)
from sssplat.errors import BehindCamera, NonPositiveDepth


def identity_cam(w=64, h=48, f=50.0):
    return Camera("id", w, h, f, f, (w - 1) / 2, (h - 1) / 2, np.eye(3), np.zeros(3))


def test_on_axis_point_projects_to_principal_point():
    cam = identity_cam()
    (u, v), depth = project(cam, [0.0, 0.0, 2.5])
    assert u == pytest.approx(cam.cx)
    assert v == pytest.approx(cam.cy)
    assert depth == pytest.approx(2.5)


def test_point_behind_camera_raises():
    cam = identity_cam()
    with pytest.raises(BehindCamera):
        project(cam, [0.0, 0.0, -1e-6])
    with pytest.raises(BehindCamera):
        project(cam, cam.camera_center)  # z == 0 exactly


def test_back_project_rejects_nonpositive_depth():
    cam = identity_cam()
    with pytest.raises(NonPositiveDepth):
        back_project(cam, (10.0, 10.0), 0.0)


def test_back_project_on_axis_unit_depth():
    cam = identity_cam()
    p = back_project(cam, (cam.cx, cam.cy), 1.0)
    assert np.allclose(p, [0.0, 0.0, 1.0], atol=1e-12)


def _random_camera(rng, w=80, h=60):
    # random rotation via QR, positive determinant
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    t = rng.normal(size=3)
    return Camera("r", w, h, 40 + 20 * rng.random(), 40 + 20 * rng.random(),
                  (w - 1) / 2 + rng.normal(), (h - 1) / 2 + rng.normal(), q, t)


def test_project_back_project_round_trip_1000_points():
    # brute-force round-trip oracle over random in-frustum points
    rng = np.random.default_rng(0)
    cam = _random_camera(rng)
    n = 0
    while n < 1000:
        p = rng.normal(scale=3.0, size=3)
        pc = cam.rotation @ p + cam.translation
        if pc[2] <= 0.1:
            continue
        n += 1
        (u, v), d = project(cam, p)
        p2 = back_project(cam, (u, v), d)
        assert np.allclose(p2, p, atol=1e-9 * max(1.0, np.linalg.norm(p)))
        (u2, v2), d2 = project(cam, p2)
        assert abs(u2 - u) < 1e-9 and abs(v2 - v) < 1e-9 and abs(d2 - d) < 1e-9


def test_reproject_identity_cameras():
    cam = identity_cam()
    corr = reproject(cam, cam, (13.25, 7.5), 2.0)
    assert corr.valid
    assert corr.target_pixel[0] == pytest.approx(13.25, abs=1e-12)
    assert corr.target_pixel[1] == pytest.approx(7.5, abs=1e-12)
    assert corr.reprojected_depth == pytest.approx(2.0, abs=1e-12)


def test_reproject_behind_target_is_invalid_depth():
    cam = identity_cam()
    # target camera looking the opposite way, placed beyond the point
    flipped = Camera("b", 64, 48, 50, 50, cam.cx, cam.cy,
                     np.diag([1.0, -1.0, -1.0]), np.array([0.0, 0.0, 1.0]))
    corr = reproject(cam, flipped, (cam.cx, cam.cy), 5.0)
    assert not corr.valid and corr.reason == INVALID_DEPTH


def test_reproject_out_of_frame_and_silhouette_filters():
    src = identity_cam()
    dst = look_at_camera("d", eye=(3.0, 0, 0), target=(0, 0, 2.0), up=(0, 1, 0),
                         width=32, height=32, focal=30.0)
    corr = reproject(src, dst, (src.cx, src.cy), 2.0)
    assert corr.valid
    sil = np.zeros((32, 32))
    corr2 = reproject(src, dst, (src.cx, src.cy), 2.0, dst_silhouette=sil)
    assert not corr2.valid and corr2.reason == OUTSIDE_SILHOUETTE
    narrow = look_at_camera("n", eye=(3.0, 0, 0), target=(0, 0, 2.0), up=(0, 1, 0),
                            width=32, height=32, focal=400.0)
    corr3 = reproject(src, narrow, (0.0, 0.0), 50.0)
    assert not corr3.valid and corr3.reason == OUT_OF_FRAME


def test_reproject_matches_plane_induced_homography():
    # analytic oracle: for points on a plane, the map between the two image
    # planes is the plane-induced homography H = K2 (R - t n^T / d) K1^{-1}
    rng = np.random.default_rng(2)
    cam1 = identity_cam(w=100, h=100, f=80.0)
    cam2 = look_at_camera("c2", eye=(0.8, 0.3, -0.2), target=(0, 0, 4.0), up=(0, 1, 0),
                          width=100, height=100, focal=75.0)
    # plane z = 4 in world (= cam1) coordinates: n.X = d with n=(0,0,1), d=4
    n = np.array([0.0, 0.0, 1.0])
    d = 4.0
    K1 = np.array([[cam1.fx, 0, cam1.cx], [0, cam1.fy, cam1.cy], [0, 0, 1.0]])
    K2 = np.array([[cam2.fx, 0, cam2.cx], [0, cam2.fy, cam2.cy], [0, 0, 1.0]])
    R, t = cam2.rotation, cam2.translation
    H = K2 @ (R + np.outer(t, n) / d) @ np.linalg.inv(K1)
    for _ in range(50):
        px = rng.uniform(20, 80, size=2)
        ray = np.array([(px[0] - cam1.cx) / cam1.fx, (px[1] - cam1.cy) / cam1.fy, 1.0])
        X = ray * (d / ray[2])
        depth = np.linalg.norm(X - cam1.camera_center)
        corr = reproject(cam1, cam2, px, depth)
        uvw = H @ np.array([px[0], px[1], 1.0])
        expect = uvw[:2] / uvw[2]
        if corr.valid:
            assert np.allclose(corr.target_pixel, expect, atol=1e-6)


def test_correspondence_validity_monotone_under_silhouette_shrink():
    src = identity_cam(32, 32, 30.0)
    dst = look_at_camera("d", eye=(1.0, 0.2, 0.0), target=(0, 0, 2.0), up=(0, 1, 0),
                         width=32, height=32, focal=30.0)
    rng = np.random.default_rng(3)
    big = np.ones((32, 32))
    small = np.zeros((32, 32))
    small[12:20, 12:20] = 1.0
    for _ in range(200):
        px = rng.uniform(0, 31, size=2)
        c_big = reproject(src, dst, px, 2.0, dst_silhouette=big)
        c_small = reproject(src, dst, px, 2.0, dst_silhouette=small)
        if c_small.valid:
            assert c_big.valid


def test_bilinear_sample_interpolates():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert bilinear_sample(img, np.array([[0.5, 0.5]]))[0] == pytest.approx(1.5)
    assert bilinear_sample(img, np.array([[1.0, 0.0]]))[0] == pytest.approx(1.0)
    assert bilinear_sample(img, np.array([[-5.0, 0.0]]))[0] == pytest.approx(0.0)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera("bad", 10, 10, 5, 5, 4, 4, np.eye(3) * 1.5, np.zeros(3))
    with pytest.raises(ValueError):
        Camera("bad", 10, 10, -5, 5, 4, 4, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        Camera("bad", 10, 10, 5, 5, 20, 4, np.eye(3), np.zeros(3))


def test_camera_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    cams = {f"{i:04d}": _random_camera(rng) for i in range(3)}
    cams = {k: Camera(k, c.width, c.height, c.fx, c.fy, c.cx, c.cy, c.rotation, c.translation)
            for k, c in cams.items()}
    path = tmp_path / "cameras.txt"
    save_cameras(path, cams)
    loaded = load_cameras(path)
    assert sorted(loaded) == sorted(cams)
    for k in cams:
        assert np.array_equal(loaded[k].rotation, cams[k].rotation)
        assert np.array_equal(loaded[k].translation, cams[k].translation)
        assert loaded[k].fx == cams[k].fx
