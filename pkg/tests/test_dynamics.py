import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from beamsplat.dynamics import (
    DegenerateConfigurationError,
    box_pose,
    build_tracks,
    compose_scene,
    decompose_frame,
    icp_refine,
    kabsch,
    spawn_scene,
    transform_gaussians,
)
from beamsplat.field import FieldConfig, Gaussians, init_from_points
from beamsplat._geom import quat_to_rotmat
from beamsplat.oracle import TrackRecord
from beamsplat.rangeview import DomainError, RigidTransform


def _random_rigid(rng):
    return RigidTransform(Rotation.random(random_state=rng.integers(1 << 30)).as_matrix(), rng.normal(0, 5, 3))


def test_kabsch_exact_recovery(rng):
    for n in list(range(3, 10)) + [50, 100]:
        T = _random_rigid(rng)
        P = rng.normal(0, 3, (n, 3))
        est = kabsch(P, T.apply(P))
        assert np.linalg.norm(est.rotation - T.rotation) < 1e-10
        assert np.linalg.norm(est.translation - T.translation) < 1e-10


def test_kabsch_reflection_input_gives_proper_rotation(rng):
    P = rng.normal(size=(20, 3))
    Q = P * np.array([1, 1, -1])
    est = kabsch(P, Q)
    assert np.linalg.det(est.rotation) == pytest.approx(1.0)
    np.testing.assert_allclose(est.rotation @ est.rotation.T, np.eye(3), atol=1e-12)


def test_kabsch_noisy_least_squares(rng):
    T = _random_rigid(rng)
    P = rng.normal(0, 3, (200, 3))
    Q = T.apply(P) + rng.normal(0, 0.01, P.shape)
    est = kabsch(P, Q)
    assert np.linalg.norm(est.rotation - T.rotation) < 5e-3
    assert est.apply(P).shape == Q.shape


def test_kabsch_degenerate():
    with pytest.raises(DegenerateConfigurationError):
        kabsch(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateConfigurationError):
        kabsch(line, line + 1)
    with pytest.raises(DomainError):
        kabsch(np.zeros((4, 3)), np.zeros((5, 3)))


def test_icp_recovers_small_motion(rng):
    P = rng.uniform(-2, 2, (400, 3))
    T = RigidTransform(Rotation.from_euler("z", 0.03).as_matrix(), [0.05, -0.02, 0.01])
    est = icp_refine(P, T.apply(P), iters=40)
    assert np.linalg.norm(est.translation - T.translation) < 1e-6


def _box(iid, frame, center, yaw=0.0, ext=(4.0, 2.0, 1.5)):
    return TrackRecord(frame, iid, np.array(center, float), yaw, np.array(ext, float))


def test_decompose_frame():
    boxes = [_box(1, 0, [10, 0, 0.75], yaw=np.pi / 2)]
    pts = np.array([[10, 1.5, 0.75], [10, 3.0, 0.75], [0, 0, 0]])
    static, si, inst = decompose_frame(pts, [0.1, 0.2, 0.3], boxes)
    np.testing.assert_allclose(static, pts[1:])
    np.testing.assert_allclose(si, [0.2, 0.3])
    local, li = inst[1]
    # yaw 90 deg maps world +y to box +x
    np.testing.assert_allclose(local, [[1.5, 0, 0]], atol=1e-12)
    np.testing.assert_allclose(li, [0.1])


def test_overlapping_boxes_assign_nearest():
    boxes = [_box(1, 0, [0, 0, 0]), _box(2, 0, [1.5, 0, 0])]
    _, _, inst = decompose_frame(np.array([[1.0, 0, 0]]), [0.5], boxes)
    assert len(inst[1][0]) == 0 and len(inst[2][0]) == 1


def test_build_tracks_and_refine(rng):
    recs = [_box(3, f, [f * 1.0, 2.0, 0.0]) for f in range(4)]
    tr = build_tracks(recs)
    assert set(tr) == {3}
    np.testing.assert_allclose(tr[3].pose(2).translation, [2.0, 2.0, 0.0])
    with pytest.raises(DomainError):
        tr[3].pose(9)
    canon = rng.uniform(-1, 1, (300, 3))
    # frame 1 box is off by 5 cm; ICP against frame 0 removes it
    shift = np.array([0.05, 0.0, 0.0])
    pts = {0: {3: (canon, np.zeros(300))}, 1: {3: (canon - shift, np.zeros(300))}}
    tr = build_tracks(recs, pts, refine=True)
    observed_world = box_pose(recs[1]).apply(canon - shift)
    # the refined pose maps the shared canonical cloud onto what frame 1 saw
    np.testing.assert_allclose(tr[3].pose(1).apply(canon), observed_world, atol=1e-6)
    np.testing.assert_allclose(tr[3].canonical_points[1], canon, atol=1e-6)


def test_transform_and_compose():
    g = Gaussians.from_arrays([[1.0, 0, 0]], [[1.0, 0, 0, 0]], [[0.1, 0.2, 0.3]], [0.5], [0.1], [0.9])
    T = RigidTransform(Rotation.from_euler("z", np.pi / 2).as_matrix(), [0, 0, 1.0])
    out = transform_gaussians(g, T)
    np.testing.assert_allclose(out.means.numpy(), [[0, 1.0, 1.0]], atol=1e-12)
    np.testing.assert_allclose(quat_to_rotmat(out.quats).numpy()[0], T.rotation, atol=1e-12)
    torch.testing.assert_close(out.scales, g.scales)
    scene = compose_scene(g, {7: g}, {7: T})
    assert len(scene) == 2
    with pytest.raises(DomainError):
        compose_scene(g, {7: g}, {})


def test_spawn_scene_places_instances():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (10, 3))
    owner = np.array([0] * 6 + [1] * 4)
    fld = init_from_points(pts, 10, n_frames=2, cfg=FieldConfig(), dtype=torch.float64, owner=owner, instance_ids=[5])
    far = RigidTransform(np.eye(3), [100.0, 0, 0])
    with torch.no_grad():
        g = spawn_scene(fld, RigidTransform(), 0, {5: far})
        assert len(g) == 10
        inst = g.anchor_index >= 6
        assert (g.means[inst, 0] > 90).all() and (g.means[~inst, 0].abs() < 10).all()
        # no pose this frame: the instance is left out
        assert len(spawn_scene(fld, RigidTransform(), 0, {})) == 6


def test_box_pose():
    T = box_pose(_box(1, 0, [1, 2, 3], yaw=0.5))
    np.testing.assert_allclose(T.apply([[0, 0, 0]]), [[1, 2, 3]])
