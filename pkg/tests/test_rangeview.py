import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamsplat.rangeview import (
    DomainError,
    RangeImage,
    RigidTransform,
    SensorSpec,
    load_rangeimage,
    pixel_ray,
    pixel_rays,
    points_to_rangeimage,
    project_point,
    rangeimage_to_points,
    read_ply,
    rot_z,
    save_rangeimage,
    write_ply,
)


def test_forward_axis_maps_to_center(spec):
    h, w, d = project_point([10.0, 0.0, 0.0], spec)
    assert h == pytest.approx(spec.beams / 2, abs=1e-12)
    assert w == pytest.approx(spec.width / 2, abs=1e-12)
    assert d == 10.0


def test_back_azimuth_maps_to_column_zero(spec):
    # y = -0 gives atan2 = -pi, which wraps from W to 0
    _, w, _ = project_point([-5.0, -0.0, 0.0], spec)
    assert w == 0.0
    _, w, _ = project_point([-5.0, 0.0, 0.0], spec)
    assert w == 0.0


def test_hand_evaluated_projection():
    spec = SensorSpec(64, 1024, 0.3, 0.3)
    x, y, z = 3.0, 4.0, 1.0
    r = math.sqrt(26.0)
    elev = math.asin(1.0 / r)
    azim = math.atan2(4.0, 3.0)
    h_ref = (1 - (elev + 0.3) / 0.6) * 64
    w_ref = 0.5 * (1 - azim / math.pi) * 1024
    h, w, d = project_point([x, y, z], spec)
    assert h == pytest.approx(h_ref, abs=1e-12)
    assert w == pytest.approx(w_ref, abs=1e-12)
    assert d == pytest.approx(r, abs=1e-12)


def test_zero_point_is_domain_error(spec):
    with pytest.raises(DomainError):
        project_point([0.0, 0.0, 0.0], spec)


def test_center_ray_is_forward(spec):
    np.testing.assert_allclose(pixel_ray(spec.beams / 2, spec.width / 2, spec), [1, 0, 0], atol=1e-15)


def test_corner_ray():
    spec = SensorSpec(64, 1024, 0.2, 0.3)
    r = pixel_ray(0.0, 0.0, spec)
    # elevation f_up, azimuth pi
    np.testing.assert_allclose(r, [-math.cos(0.2), 0.0, math.sin(0.2)], atol=1e-15)


def test_round_trip_random(spec, rng):
    n = 1000
    h = rng.uniform(0.01, spec.beams - 0.01, n)
    w = rng.uniform(0.01, spec.width - 0.01, n)
    d = rng.uniform(spec.range_min, spec.range_max, n)
    p = pixel_ray(h, w, spec) * d[:, None]
    h2, w2, d2 = project_point(p, spec)
    assert np.max(np.abs(h2 - h)) < 1e-9
    assert np.max(np.abs(w2 - w)) < 1e-9
    assert np.max(np.abs(d2 - d)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0.001, 31.999),
    st.floats(0.001, 255.999),
    st.floats(1.0, 60.0),
)
def test_round_trip_property(h, w, d):
    spec = SensorSpec(32, 256, 0.26, 0.26)
    h2, w2, d2 = project_point(pixel_ray(h, w, spec) * d, spec)
    assert abs(h2 - h) < 1e-9 * max(1, h) and abs(w2 - w) < 1e-9 * max(1, w) and abs(d2 - d) < 1e-9 * d


def test_rays_are_unit(spec):
    r = pixel_rays(spec)
    assert r.shape == (spec.beams, spec.width, 3)
    np.testing.assert_allclose(np.linalg.norm(r, axis=-1), 1.0, atol=1e-15)


def test_monotonicity(spec):
    elev = np.linspace(-0.25, 0.25, 50)
    pts = np.stack([np.cos(elev), np.zeros_like(elev), np.sin(elev)], 1)
    h, _, _ = project_point(pts, spec)
    assert np.all(np.diff(h) < 0)
    az = np.linspace(-3.1, 3.1, 50)
    pts = np.stack([np.cos(az), np.sin(az), np.zeros_like(az)], 1)
    _, w, _ = project_point(pts, spec)
    assert np.all(np.diff(w) < 0)


def test_empty_points_give_invalid_image(spec):
    img = points_to_rangeimage(np.zeros((0, 3)), np.zeros(0), spec)
    assert not img.valid.any()
    assert img.diagnostics["binned"] == 0


def test_nearest_return_wins(spec):
    ray = pixel_ray(10.5, 20.5, spec)
    img = points_to_rangeimage([ray * 9, ray * 5], [0.2, 0.7], spec)
    assert img.valid.sum() == 1
    assert img.depth[10, 20] == pytest.approx(5.0)
    assert img.intensity[10, 20] == 0.7


def test_out_of_fov_counted(spec):
    img = points_to_rangeimage([[1, 0, 5.0], [100, 0, 0], [10, 0, 0]], [0.1, 0.1, 0.1], spec)
    assert img.diagnostics == {"out_of_fov": 1, "out_of_range": 1, "binned": 1}


def test_binning_is_permutation_invariant(spec, rng):
    pts = rng.normal(size=(500, 3)) * [10, 10, 1]
    inten = rng.random(500)
    a = points_to_rangeimage(pts, inten, spec)
    p = rng.permutation(500)
    b = points_to_rangeimage(pts[p], inten[p], spec)
    for ch in RangeImage.CHANNELS:
        np.testing.assert_array_equal(getattr(a, ch), getattr(b, ch))


def test_single_pixel_back_projection(spec):
    img = RangeImage.empty(spec)
    img.valid[3, 7] = True
    img.depth[3, 7] = 12.0
    img.intensity[3, 7] = 0.5
    pts, inten = rangeimage_to_points(img)
    np.testing.assert_allclose(pts[0], 12.0 * pixel_ray(3.5, 7.5, spec), atol=1e-12)
    assert inten.tolist() == [0.5]


def test_all_invalid_back_projects_to_nothing(spec):
    pts, inten = rangeimage_to_points(RangeImage.empty(spec))
    assert pts.shape == (0, 3) and len(inten) == 0


def test_yaw_pose_rotates_points(spec, rng):
    img = points_to_rangeimage(rng.normal(size=(300, 3)) * [10, 10, 1], rng.random(300), spec)
    base, _ = rangeimage_to_points(img)
    pose = RigidTransform(rot_z(math.pi / 2), np.zeros(3))
    rotated, _ = rangeimage_to_points(img, pose)
    np.testing.assert_allclose(rotated, base @ rot_z(math.pi / 2).T, atol=1e-12)


def test_non_rigid_pose_rejected():
    with pytest.raises(DomainError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(DomainError):
        RigidTransform(np.eye(3) * 2, np.zeros(3))


def test_transform_algebra(rng):
    a = RigidTransform.from_xyz_yaw(1, 2, 3, 0.4)
    b = RigidTransform.from_xyz_yaw(-1, 0.5, 0, -1.1)
    p = rng.normal(size=(10, 3))
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)


def test_invalid_spec_rejected():
    with pytest.raises(DomainError):
        SensorSpec(0, 10, 0.1, 0.1)
    with pytest.raises(DomainError):
        SensorSpec(4, 10, 0.0, 0.0)
    with pytest.raises(DomainError):
        SensorSpec(4, 10, 0.1, 0.1, range_min=5, range_max=2)


def test_rangeimage_file_round_trip(tmp_path, spec, rng):
    img = points_to_rangeimage(rng.normal(size=(400, 3)) * [10, 10, 1], rng.random(400), spec)
    img.depth = img.depth.astype(np.float32).astype(np.float64)
    img.intensity = img.intensity.astype(np.float32).astype(np.float64)
    save_rangeimage(img, tmp_path / "a.rv")
    back = load_rangeimage(tmp_path / "a.rv")
    assert back.spec == spec
    for ch in RangeImage.CHANNELS:
        np.testing.assert_array_equal(getattr(back, ch), getattr(img, ch))


def test_rangeimage_bad_magic(tmp_path):
    (tmp_path / "x.rv").write_bytes(b"NOPE" + bytes(100))
    with pytest.raises(DomainError):
        load_rangeimage(tmp_path / "x.rv")


def test_ply_round_trip_is_lossless(tmp_path, rng):
    pts = rng.normal(size=(50, 3)) * 7
    inten = rng.random(50)
    write_ply(tmp_path / "p.ply", pts, inten)
    p2, i2 = read_ply(tmp_path / "p.ply")
    np.testing.assert_array_equal(p2, pts)
    np.testing.assert_array_equal(i2, inten)
