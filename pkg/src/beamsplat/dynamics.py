"""Dynamic instances: box decomposition, Kabsch alignment and scene composition."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from ._geom import quat_mul, rotmat_to_quat
from .field import Field, Gaussians, spawn
from .oracle import TrackRecord
from .rangeview import DomainError, RigidTransform, rot_z


class DegenerateConfigurationError(DomainError):
    pass


def kabsch(P, Q) -> RigidTransform:
    """Least-squares proper rigid transform with ``R @ p_i + t ≈ q_i``.

    Raises DegenerateConfigurationError for fewer than three points or
    (near) collinear configurations.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise DomainError("kabsch expects two [N, 3] arrays of equal shape")
    if len(P) < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {len(P)}")
    p0, q0 = P.mean(0), Q.mean(0)
    Pc, Qc = P - p0, Q - q0
    Hm = Pc.T @ Qc
    U, S, Vt = np.linalg.svd(Hm)
    # rank check on both clouds: a collinear cloud has one significant direction
    sp = np.linalg.svd(Pc, compute_uv=False)
    sq = np.linalg.svd(Qc, compute_uv=False)
    if sp[1] <= 1e-10 * max(sp[0], 1e-300) or sq[1] <= 1e-10 * max(sq[0], 1e-300) or S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateConfigurationError("points are collinear; rotation is not determined")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    # re-orthonormalize against accumulated roundoff
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(R, q0 - R @ p0)


def rigid_residual(P, Q, T: RigidTransform) -> float:
    return float(np.sum((T.apply(P) - np.asarray(Q)) ** 2))


def icp_refine(src, dst, init: RigidTransform | None = None, iters: int = 20, max_dist: float = 0.5) -> RigidTransform:
    """Refine ``src -> dst`` with nearest-neighbor correspondences and Kabsch."""
    T = init or RigidTransform()
    tree = cKDTree(dst)
    for _ in range(iters):
        moved = T.apply(src)
        dist, nn = tree.query(moved)
        m = dist <= max_dist
        if m.sum() < 3:
            break
        step = kabsch(moved[m], np.asarray(dst)[nn[m]])
        T = step.compose(T)
        if np.abs(step.rotation - np.eye(3)).max() < 1e-12 and np.linalg.norm(step.translation) < 1e-12:
            break
    return T


@dataclass
class InstanceTrack:
    instance_id: int
    boxes: dict[int, TrackRecord] = field(default_factory=dict)
    poses: dict[int, RigidTransform] = field(default_factory=dict)
    canonical_points: list = field(default_factory=list)
    canonical_intensity: list = field(default_factory=list)

    def pose(self, frame: int) -> RigidTransform:
        if frame not in self.poses:
            raise DomainError(f"instance {self.instance_id} has no pose for frame {frame}")
        return self.poses[frame]


def box_pose(rec: TrackRecord) -> RigidTransform:
    """Canonical (box-centered) to world transform."""
    return RigidTransform(rot_z(rec.yaw), np.asarray(rec.center, dtype=np.float64))


def decompose_frame(points, intensity, boxes: list[TrackRecord], margin: float = 0.1):
    """Split world points into static points and per-instance canonical points.

    Points inside several boxes go to the box whose center is nearest.
    Returns ``(static_points, static_intensity, {id: (canonical_points, intensity)})``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inten = np.asarray(intensity, dtype=np.float64).reshape(-1)
    if not boxes:
        return pts, inten, {}
    owner = np.full(len(pts), -1)
    best = np.full(len(pts), np.inf)
    locals_ = []
    for k, rec in enumerate(boxes):
        T = box_pose(rec)
        local = T.inverse().apply(pts)
        locals_.append(local)
        inside = np.all(np.abs(local) <= np.asarray(rec.extents) / 2 + margin, axis=1)
        dc = np.linalg.norm(pts - np.asarray(rec.center), axis=1)
        take = inside & (dc < best)
        owner[take] = k
        best[take] = dc[take]
    static = owner < 0
    inst = {}
    for k, rec in enumerate(boxes):
        m = owner == k
        inst[rec.instance_id] = (locals_[k][m], inten[m])
    return pts[static], inten[static], inst


def build_tracks(tracks: list[TrackRecord], frames_points: dict[int, tuple] | None = None, refine: bool = False) -> dict[int, InstanceTrack]:
    """Group track records by instance; poses come from the boxes.

    With ``refine`` and per-frame canonical points, each frame's pose is
    corrected by ICP (nearest neighbors inside the box, Kabsch updates)
    against the accumulation of the preceding frames.
    """
    out: dict[int, InstanceTrack] = {}
    for rec in sorted(tracks, key=lambda r: (r.instance_id, r.frame)):
        tr = out.setdefault(rec.instance_id, InstanceTrack(rec.instance_id))
        tr.boxes[rec.frame] = rec
        tr.poses[rec.frame] = box_pose(rec)
    if frames_points:
        for iid, tr in out.items():
            for f in sorted(tr.boxes):
                if f not in frames_points or iid not in frames_points[f]:
                    continue
                pts, inten = frames_points[f][iid]
                if len(pts) == 0:
                    continue
                if refine and tr.canonical_points and len(pts) >= 3:
                    acc = np.concatenate(tr.canonical_points)
                    if len(acc) >= 3:
                        corr = icp_refine(pts, acc)
                        tr.poses[f] = tr.poses[f].compose(corr.inverse())
                        pts = corr.apply(pts)
                tr.canonical_points.append(pts)
                tr.canonical_intensity.append(inten)
    return out


def transform_gaussians(g: Gaussians, pose: RigidTransform) -> Gaussians:
    """Apply a rigid pose to means and rotations; scales and attributes are untouched."""
    R = torch.as_tensor(pose.rotation, dtype=g.means.dtype)
    t = torch.as_tensor(pose.translation, dtype=g.means.dtype)
    q = torch.as_tensor(rotmat_to_quat(pose.rotation), dtype=g.quats.dtype)
    return Gaussians(
        g.means @ R.T + t,
        quat_mul(q, g.quats),
        g.scales,
        g.intensity,
        g.raydrop,
        g.opacity,
        g.anchor_index,
        None if g.offsets is None else g.offsets @ R.T,
        g.skipped,
    )


def compose_scene(static: Gaussians, instances: dict[int, Gaussians], poses: dict[int, RigidTransform]) -> Gaussians:
    """Place canonical-frame instance Gaussians in the world and join them with the background."""
    parts = [static]
    for iid in sorted(instances):
        if iid not in poses:
            raise DomainError(f"no pose for instance {iid}")
        parts.append(transform_gaussians(instances[iid], poses[iid]))
    return Gaussians.concat(parts)


def spawn_scene(
    fld: Field,
    sensor_pose: RigidTransform,
    latent_frame: int,
    instance_poses: dict[int, RigidTransform] | None = None,
    cull_range: float | None = None,
) -> Gaussians:
    """Spawn every anchor group for one frame and compose them in world space.

    Instance anchors are spawned in their canonical frame (viewpoint mapped
    through the inverse pose) with the instance's own latent code; groups
    without a pose this frame are left out. ``cull_range`` skips anchors
    farther than that from the viewpoint before evaluating the MLPs.
    """
    instance_poses = instance_poses or {}
    o = np.asarray(sensor_pose.translation, dtype=np.float64)
    parts_static = None
    inst_parts = {}
    owner = fld.owner
    for group in range(1 + len(fld.instance_ids)):
        if group == 0:
            o_local = o
            iid = None
        else:
            iid = fld.instance_ids[group - 1]
            if iid not in instance_poses:
                continue
            o_local = instance_poses[iid].inverse().apply(o)
        idx = torch.nonzero(owner == group).reshape(-1)
        if cull_range is not None and len(idx):
            with torch.no_grad():
                dist = torch.linalg.norm(fld.positions[idx] - torch.as_tensor(o_local, dtype=fld.dtype), dim=1)
                bound = fld.config.offset_bound * fld.base_scale[idx].max(dim=1).values * 1.8
            idx = idx[dist <= cull_range + bound]
        if len(idx) == 0:
            continue
        g = spawn(fld, o_local, fld.latents[group, latent_frame], index=idx)
        if group == 0:
            parts_static = g
        else:
            inst_parts[iid] = g
    if parts_static is None:
        dt = fld.dtype
        parts_static = Gaussians(
            torch.zeros((0, 3), dtype=dt), torch.zeros((0, 4), dtype=dt), torch.zeros((0, 3), dtype=dt),
            torch.zeros(0, dtype=dt), torch.zeros(0, dtype=dt), torch.zeros(0, dtype=dt),
            torch.zeros(0, dtype=torch.int64), torch.zeros((0, 3), dtype=dt),
        )
    return compose_scene(parts_static, inst_parts, instance_poses)
