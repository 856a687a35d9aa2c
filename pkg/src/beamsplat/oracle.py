"""Analytic ray-cast LiDAR simulator used as ground truth.

Scenes are built from planes (infinite or rectangular), spheres and
axis-aligned boxes. Moving instances are boxes carried by per-frame rigid
poses. Intensity follows a diffuse incident-angle model with inverse-square
range falloff; ray drops come from range limits, a near-blind radius and a
seeded per-pixel hash.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rangeview import (
    DomainError,
    RangeImage,
    RigidTransform,
    SensorSpec,
    load_rangeimage,
    pixel_rays,
    rot_z,
    save_rangeimage,
)

_EPS_T = 1e-9


@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray
    reflectance: float = 0.5
    # Optional rectangle: in-plane axes and half extents along them.
    axes: np.ndarray | None = None
    half_extents: np.ndarray | None = None

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        if self.axes is not None:
            self.axes = np.asarray(self.axes, dtype=np.float64)
            self.half_extents = np.asarray(self.half_extents, dtype=np.float64)

    def intersect(self, o, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - o) @ self.normal) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        t = np.where(t > _EPS_T, t, np.inf)
        if self.axes is not None:
            hit = o + dirs * np.where(np.isfinite(t), t, 0.0)[:, None]
            local = (hit - self.point) @ self.axes.T
            inside = np.all(np.abs(local) <= self.half_extents, axis=1)
            t = np.where(inside, t, np.inf)
        normals = np.broadcast_to(self.normal, dirs.shape)
        return t, normals


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    reflectance: float = 0.5

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def intersect(self, o, dirs):
        oc = o - self.center
        b = dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > _EPS_T, t0, np.where(t1 > _EPS_T, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        hit = o + dirs * np.where(np.isfinite(t), t, 0.0)[:, None]
        normals = (hit - self.center) / self.radius
        return t, normals


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    reflectance: float = 0.5

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)

    def intersect(self, o, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (self.lo - o) * inv
            tb = (self.hi - o) * inv
        tmin = np.minimum(ta, tb)
        tmax = np.maximum(ta, tb)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        t_enter = tmin.max(axis=1)
        t_exit = tmax.min(axis=1)
        t = np.where(t_enter > _EPS_T, t_enter, t_exit)
        t = np.where((t_exit >= t_enter) & (t > _EPS_T), t, np.inf)
        axis = np.where(t_enter > _EPS_T, tmin.argmax(axis=1), tmax.argmin(axis=1))
        normals = np.zeros_like(dirs)
        normals[np.arange(len(dirs)), axis] = 1.0
        return t, normals


@dataclass
class MovingInstance:
    """A box defined in its canonical frame and carried by per-frame poses."""

    instance_id: int
    box: Box
    poses: dict[int, RigidTransform]

    @property
    def extents(self) -> np.ndarray:
        return self.box.hi - self.box.lo

    def pose(self, frame: int) -> RigidTransform | None:
        return self.poses.get(frame)


@dataclass
class DropModel:
    near_blind: float = 0.0
    stochastic_rate: float = 0.0
    seed: int = 0


@dataclass
class AnalyticScene:
    primitives: list = field(default_factory=list)
    instances: list[MovingInstance] = field(default_factory=list)
    drop: DropModel = field(default_factory=DropModel)
    # Reference distance of the inverse-square intensity falloff (m).
    d0: float = 10.0

    def __post_init__(self):
        for prim in self.primitives + [inst.box for inst in self.instances]:
            if not 0.0 <= prim.reflectance <= 1.0:
                raise DomainError(f"reflectance {prim.reflectance} outside [0, 1]")


def _hash_uniform(seed: int, frame: int, pixels: np.ndarray) -> np.ndarray:
    """splitmix64 of (seed, frame, pixel) mapped to [0, 1)."""
    with np.errstate(over="ignore"):
        x = (
            np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)
            + np.uint64(frame) * np.uint64(0xBF58476D1CE4E5B9)
            + pixels.astype(np.uint64) * np.uint64(0x94D049BB133111EB)
        )
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def cast_rays(scene: AnalyticScene, origin, dirs, frame: int = 0):
    """Nearest hit of each ray. Returns ``(t, cos_incidence, reflectance)``; misses have ``t = inf``."""
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_cos = np.zeros(n)
    best_refl = np.zeros(n)
    for prim, pose in _world_primitives(scene, frame):
        if pose is None:
            t, normals = prim.intersect(origin, dirs)
            nd = normals
        else:
            inv = pose.inverse()
            o_l = inv.apply(origin)
            d_l = dirs @ inv.rotation.T
            t, normals = prim.intersect(o_l, d_l)
            nd = normals @ pose.rotation.T
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_cos = np.where(closer, np.abs(np.einsum("ij,ij->i", nd, dirs)), best_cos)
        best_refl = np.where(closer, prim.reflectance, best_refl)
    return best_t, best_cos, best_refl


def _world_primitives(scene: AnalyticScene, frame: int):
    for prim in scene.primitives:
        yield prim, None
    for inst in scene.instances:
        pose = inst.pose(frame)
        if pose is not None:
            yield inst.box, pose


def raycast_frame(scene: AnalyticScene, pose: RigidTransform, spec: SensorSpec, frame: int = 0) -> RangeImage:
    """Exact ray-cast scan through every pixel center.

    The ``raydrop_prob`` channel holds the binary drop mask (1 = dropped).
    """
    H, W = spec.shape
    rays = pixel_rays(spec).reshape(-1, 3)
    dirs = rays @ pose.rotation.T
    t, cos_inc, refl = cast_rays(scene, pose.translation, dirs, frame)
    dropped = ~np.isfinite(t) | (t > spec.range_max) | (t < spec.range_min)
    if scene.drop.near_blind > 0:
        dropped |= t < scene.drop.near_blind
    if scene.drop.stochastic_rate > 0:
        u = _hash_uniform(scene.drop.seed, frame, np.arange(H * W))
        dropped |= u < scene.drop.stochastic_rate
    valid = ~dropped
    depth = np.where(valid, t, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        inten = refl * cos_inc * (scene.d0 / depth) ** 2
    inten = np.where(valid, np.clip(inten, 0.0, 1.0), 0.0)
    return RangeImage(
        spec,
        depth=depth.reshape(H, W),
        intensity=inten.reshape(H, W),
        raydrop_prob=dropped.astype(np.float64).reshape(H, W),
        accum_alpha=valid.astype(np.float64).reshape(H, W),
        valid=valid.reshape(H, W),
    )


# ---------------------------------------------------------------------------
# sequences and datasets


@dataclass
class TrackRecord:
    frame: int
    instance_id: int
    center: np.ndarray
    yaw: float
    extents: np.ndarray

    def to_json(self) -> dict:
        return {
            "frame": self.frame,
            "id": self.instance_id,
            "center": [float(v) for v in self.center],
            "yaw": float(self.yaw),
            "extents": [float(v) for v in self.extents],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrackRecord":
        return cls(int(d["frame"]), int(d["id"]), np.asarray(d["center"], float), float(d["yaw"]), np.asarray(d["extents"], float))


@dataclass
class Dataset:
    spec: SensorSpec
    frames: list[RangeImage]
    poses: list[RigidTransform]
    tracks: list[TrackRecord]
    train_idx: list[int]
    val_idx: list[int]

    def tracks_for(self, frame: int) -> list[TrackRecord]:
        return [t for t in self.tracks if t.frame == frame]


def instance_tracks(scene: AnalyticScene, n_frames: int) -> list[TrackRecord]:
    out = []
    for f in range(n_frames):
        for inst in scene.instances:
            pose = inst.pose(f)
            if pose is None:
                continue
            center_local = 0.5 * (inst.box.lo + inst.box.hi)
            yaw = float(np.arctan2(pose.rotation[1, 0], pose.rotation[0, 0]))
            out.append(TrackRecord(f, inst.instance_id, pose.apply(center_local), yaw, inst.extents.copy()))
    return out


def split_indices(n: int, n_val: int) -> tuple[list[int], list[int]]:
    """Hold out ``n_val`` interior frames spread evenly through the sequence."""
    if n_val <= 0 or n < 3:
        return list(range(n)), []
    n_val = min(n_val, n - 2)
    val = sorted({int(round(v)) for v in np.linspace(0, n - 1, n_val + 2)[1:-1]})
    train = [i for i in range(n) if i not in val]
    return train, val


def generate_sequence(scene: AnalyticScene, trajectory: list[RigidTransform], spec: SensorSpec, n_val: int = 4) -> Dataset:
    if len(trajectory) == 0:
        raise DomainError("trajectory must contain at least one pose")
    frames = [raycast_frame(scene, pose, spec, frame=i) for i, pose in enumerate(trajectory)]
    train, val = split_indices(len(trajectory), n_val)
    return Dataset(spec, frames, list(trajectory), instance_tracks(scene, len(trajectory)), train, val)


def urban_toy(n_frames: int = 54, dynamic: bool = True, seed: int = 0, near_blind: float = 3.0, stochastic_rate: float = 0.01):
    """Benchmark street: ground, two walls, three spheres and one moving box.

    Returns ``(scene, trajectory, spec)``. The sensor drives along +x at
    0.5 m per frame, 1.8 m above the ground; the box moves 1 m per frame
    in the opposite lane.
    """
    spec = SensorSpec(32, 256, 0.26, 0.26, 1.0, 60.0, 0.04)
    prims = [
        Plane([0, 0, 0], [0, 0, 1], reflectance=0.35),
        Plane([20, 10, 4], [0, -1, 0], 0.6, axes=np.array([[1, 0, 0], [0, 0, 1.0]]), half_extents=np.array([60, 4.0])),
        Plane([20, -10, 4], [0, 1, 0], 0.5, axes=np.array([[1, 0, 0], [0, 0, 1.0]]), half_extents=np.array([60, 4.0])),
        Sphere([12, 4.5, 1.2], 1.2, reflectance=0.8),
        Sphere([22, -5.0, 1.0], 1.0, reflectance=0.45),
        Sphere([31, 3.5, 0.8], 0.8, reflectance=0.9),
    ]
    instances = []
    if dynamic:
        box = Box([-2.0, -1.0, 0.0], [2.0, 1.0, 1.5], reflectance=0.7)
        poses = {f: RigidTransform(rot_z(0.0), np.array([5.0 + 1.0 * f, -7.5, 0.0])) for f in range(n_frames)}
        instances.append(MovingInstance(1, box, poses))
    scene = AnalyticScene(prims, instances, DropModel(near_blind, stochastic_rate, seed), d0=10.0)
    trajectory = [RigidTransform.from_xyz_yaw(0.5 * f, 0.0, 1.8) for f in range(n_frames)]
    return scene, trajectory, spec


# ---------------------------------------------------------------------------
# scene files and dataset directories


def _prim_from_json(d: dict):
    kind = d.get("type")
    refl = float(d.get("reflectance", 0.5))
    if kind == "plane":
        axes = d.get("axes")
        return Plane(d["point"], d["normal"], refl, None if axes is None else np.asarray(axes, float), d.get("half_extents"))
    if kind == "sphere":
        return Sphere(d["center"], float(d["radius"]), refl)
    if kind == "box":
        return Box(d["lo"], d["hi"], refl)
    raise KeyError(f"unknown primitive type {kind!r}")


def _prim_to_json(p) -> dict:
    if isinstance(p, Plane):
        d = {"type": "plane", "point": p.point.tolist(), "normal": p.normal.tolist(), "reflectance": p.reflectance}
        if p.axes is not None:
            d["axes"] = p.axes.tolist()
            d["half_extents"] = p.half_extents.tolist()
        return d
    if isinstance(p, Sphere):
        return {"type": "sphere", "center": p.center.tolist(), "radius": p.radius, "reflectance": p.reflectance}
    return {"type": "box", "lo": p.lo.tolist(), "hi": p.hi.tolist(), "reflectance": p.reflectance}


class SceneParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


def scene_to_json(scene: AnalyticScene) -> dict:
    return {
        "d0": scene.d0,
        "drop": {"near_blind": scene.drop.near_blind, "stochastic_rate": scene.drop.stochastic_rate, "seed": scene.drop.seed},
        "primitives": [_prim_to_json(p) for p in scene.primitives],
        "instances": [
            {
                "id": inst.instance_id,
                "box": _prim_to_json(inst.box),
                "poses": {str(f): {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()} for f, p in inst.poses.items()},
            }
            for inst in scene.instances
        ],
    }


def load_scene(path) -> AnalyticScene:
    """Parse a JSON scene description; errors carry the offending line number."""
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneParseError(path, e.lineno, e.msg) from None

    def line_of(key: str, nth: int = 0) -> int:
        pos = -1
        for _ in range(nth + 1):
            pos = text.find(key, pos + 1)
            if pos < 0:
                return 1
        return text.count("\n", 0, pos) + 1

    prims = []
    for i, p in enumerate(d.get("primitives", [])):
        try:
            prims.append(_prim_from_json(p))
        except (KeyError, TypeError, ValueError) as e:
            raise SceneParseError(path, line_of('"type"', i), f"primitive {i}: {e}") from None
    instances = []
    for i, inst in enumerate(d.get("instances", [])):
        try:
            box = _prim_from_json(inst["box"])
            poses = {int(f): RigidTransform(np.asarray(p["rotation"]), np.asarray(p["translation"])) for f, p in inst["poses"].items()}
            instances.append(MovingInstance(int(inst["id"]), box, poses))
        except (KeyError, TypeError, ValueError) as e:
            raise SceneParseError(path, line_of('"box"', i), f"instance {i}: {e}") from None
    drop = d.get("drop", {})
    try:
        return AnalyticScene(
            prims,
            instances,
            DropModel(float(drop.get("near_blind", 0.0)), float(drop.get("stochastic_rate", 0.0)), int(drop.get("seed", 0))),
            float(d.get("d0", 10.0)),
        )
    except DomainError as e:
        raise SceneParseError(path, 1, str(e)) from None


def write_poses_csv(path, poses: list[RigidTransform]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22", "tx", "ty", "tz"])
        for i, p in enumerate(poses):
            w.writerow([i] + [repr(float(v)) for v in p.rotation.ravel()] + [repr(float(v)) for v in p.translation])


def read_poses_csv(path) -> list[RigidTransform]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            R = np.array([[float(row[f"r{i}{j}"]) for j in range(3)] for i in range(3)])
            t = np.array([float(row["tx"]), float(row["ty"]), float(row["tz"])])
            out.append(RigidTransform(R, t))
    return out


def write_tracks(path, tracks: list[TrackRecord]) -> None:
    with open(path, "w") as f:
        for t in tracks:
            f.write(json.dumps(t.to_json()) + "\n")


def read_tracks(path) -> list[TrackRecord]:
    p = Path(path)
    if not p.exists():
        return []
    return [TrackRecord.from_json(json.loads(line)) for line in p.read_text().splitlines() if line.strip()]


def save_dataset(ds: Dataset, out_dir) -> None:
    """Layout: ``frames/NNNN.rv``, ``poses.csv``, ``tracks.jsonl``, ``split.json``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(ds.frames):
        save_rangeimage(img, out / "frames" / f"{i:04d}.rv")
    write_poses_csv(out / "poses.csv", ds.poses)
    write_tracks(out / "tracks.jsonl", ds.tracks)
    (out / "split.json").write_text(json.dumps({"train": ds.train_idx, "val": ds.val_idx}, indent=1) + "\n")


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "poses.csv").exists() or not (root / "frames").is_dir():
        raise DomainError(f"{root}: not a dataset directory (need frames/ and poses.csv)")
    poses = read_poses_csv(root / "poses.csv")
    files = sorted((root / "frames").glob("*.rv"))
    if len(files) != len(poses):
        raise DomainError(f"{root}: {len(files)} frames but {len(poses)} poses")
    frames = [load_rangeimage(f) for f in files]
    spec = frames[0].spec
    if any(f.spec != spec for f in frames):
        raise DomainError(f"{root}: frames disagree on sensor spec")
    split_path = root / "split.json"
    if split_path.exists():
        split = json.loads(split_path.read_text())
        train, val = list(split["train"]), list(split["val"])
    else:
        train, val = list(range(len(frames))), []
    return Dataset(spec, frames, poses, read_tracks(root / "tracks.jsonl"), train, val)
