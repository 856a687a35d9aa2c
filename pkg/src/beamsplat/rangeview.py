"""Range-view image model for spinning LiDAR sensors.

Rows index elevation (top row = upper FOV edge), columns index azimuth
(column 0 = azimuth pi, decreasing to the right). Pixel ``(i, j)`` samples
the ray through the continuous coordinate ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "DomainError",
    "SensorSpec",
    "RangeImage",
    "RigidTransform",
    "project_point",
    "pixel_ray",
    "pixel_rays",
    "points_to_rangeimage",
    "rangeimage_to_points",
    "save_rangeimage",
    "load_rangeimage",
    "write_ply",
    "read_ply",
]


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain."""


@dataclass(frozen=True)
class SensorSpec:
    beams: int
    width: int
    f_up: float
    f_down: float
    range_min: float = 1.0
    range_max: float = 60.0
    # Half-angle bound (rad) on the ray-to-center angle a splat may cover.
    divergence: float = 0.04

    def __post_init__(self):
        if self.beams <= 0 or self.width <= 0:
            raise DomainError(f"image size must be positive, got {self.beams}x{self.width}")
        if self.f_up < 0 or self.f_down < 0 or self.f_up + self.f_down <= 0:
            raise DomainError("vertical field of view must be positive")
        if not 0 < self.range_min < self.range_max:
            raise DomainError("need 0 < range_min < range_max")
        if self.divergence <= 0:
            raise DomainError("divergence must be positive")

    @property
    def f_v(self) -> float:
        return self.f_up + self.f_down

    @property
    def shape(self) -> tuple[int, int]:
        return (self.beams, self.width)

    @property
    def d_elev(self) -> float:
        """Angular height of one row (rad)."""
        return self.f_v / self.beams

    @property
    def d_azim(self) -> float:
        """Angular width of one column (rad)."""
        return 2.0 * np.pi / self.width

    def with_beams(self, beams: int) -> "SensorSpec":
        return replace(self, beams=beams)

    def to_dict(self) -> dict:
        return {
            "beams": self.beams,
            "width": self.width,
            "f_up": self.f_up,
            "f_down": self.f_down,
            "range_min": self.range_min,
            "range_max": self.range_max,
            "divergence": self.divergence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorSpec":
        return cls(
            beams=int(d["beams"]),
            width=int(d["width"]),
            f_up=float(d["f_up"]),
            f_down=float(d["f_down"]),
            range_min=float(d.get("range_min", 1.0)),
            range_max=float(d.get("range_max", 60.0)),
            divergence=float(d.get("divergence", 0.04)),
        )


@dataclass(frozen=True)
class RigidTransform:
    """``x_world = rotation @ x_local + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3) or not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise DomainError("pose must be a finite 3x3 rotation and 3-vector")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise DomainError("pose rotation is not a proper rotation")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float, yaw: float = 0.0) -> "RigidTransform":
        return cls(rot_z(yaw), np.array([x, y, z], dtype=np.float64))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class RangeImage:
    spec: SensorSpec
    depth: np.ndarray
    intensity: np.ndarray
    raydrop_prob: np.ndarray
    accum_alpha: np.ndarray
    valid: np.ndarray
    diagnostics: dict = field(default_factory=dict, compare=False)

    CHANNELS = ("depth", "intensity", "raydrop_prob", "accum_alpha", "valid")

    @classmethod
    def empty(cls, spec: SensorSpec) -> "RangeImage":
        H, W = spec.shape
        return cls(
            spec,
            depth=np.zeros((H, W)),
            intensity=np.zeros((H, W)),
            raydrop_prob=np.ones((H, W)),
            accum_alpha=np.zeros((H, W)),
            valid=np.zeros((H, W), dtype=bool),
        )

    def copy(self) -> "RangeImage":
        return RangeImage(
            self.spec,
            self.depth.copy(),
            self.intensity.copy(),
            self.raydrop_prob.copy(),
            self.accum_alpha.copy(),
            self.valid.copy(),
            dict(self.diagnostics),
        )

    def check(self) -> None:
        H, W = self.spec.shape
        for name in self.CHANNELS:
            if getattr(self, name).shape != (H, W):
                raise DomainError(f"channel {name} has shape {getattr(self, name).shape}, expected {(H, W)}")
        if np.any(self.depth[~self.valid] != 0) or np.any(self.intensity[~self.valid] != 0):
            raise DomainError("invalid pixels must carry zero depth and intensity")


def project_point(p, spec: SensorSpec):
    """Map sensor-frame point(s) to continuous ``(h, w, d)``.

    Accepts a single 3-vector or an ``[N, 3]`` array; returns scalars or arrays
    accordingly. Azimuth uses ``atan2`` with range (-pi, pi], and ``w`` is
    wrapped into ``[0, W)``.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    P = p.reshape(-1, 3)
    d = np.linalg.norm(P, axis=1)
    if np.any(d <= 0):
        raise DomainError("cannot project a point at the sensor origin")
    elev = np.arcsin(np.clip(P[:, 2] / d, -1.0, 1.0))
    azim = np.arctan2(P[:, 1], P[:, 0])
    H, W = spec.shape
    h = (1.0 - (elev + spec.f_down) / spec.f_v) * H
    w = 0.5 * (1.0 - azim / np.pi) * W
    w = np.where(w >= W, w - W, w)
    if single:
        return float(h[0]), float(w[0]), float(d[0])
    return h, w, d


def pixel_ray(h, w, spec: SensorSpec) -> np.ndarray:
    """Unit ray direction(s) for continuous image coordinates."""
    h = np.asarray(h, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    H, W = spec.shape
    elev = spec.f_up - spec.f_v * h / H
    azim = np.pi - 2.0 * np.pi * w / W
    ce = np.cos(elev)
    return np.stack([np.cos(azim) * ce, np.sin(azim) * ce, np.sin(elev)], axis=-1)


def pixel_rays(spec: SensorSpec) -> np.ndarray:
    """Ray directions through every pixel center, shape ``[H, W, 3]``."""
    H, W = spec.shape
    hh, ww = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    return pixel_ray(hh, ww, spec)


def points_to_rangeimage(points, intensity, spec: SensorSpec) -> RangeImage:
    """Bin points into a range image keeping the nearest return per pixel.

    Points outside the vertical FOV or the range limits are dropped and
    counted in ``diagnostics``.
    """
    img = RangeImage.empty(spec)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inten = np.asarray(intensity, dtype=np.float64).reshape(-1)
    if len(pts) != len(inten):
        raise DomainError("points and intensity lengths differ")
    diag = {"out_of_fov": 0, "out_of_range": 0, "binned": 0}
    img.diagnostics = diag
    if len(pts) == 0:
        return img
    if not np.all(np.isfinite(pts)):
        raise DomainError("points must be finite")
    d = np.linalg.norm(pts, axis=1)
    in_range = (d >= spec.range_min) & (d <= spec.range_max)
    diag["out_of_range"] = int((~in_range).sum())
    pts, inten, d = pts[in_range], inten[in_range], d[in_range]
    if len(pts) == 0:
        return img
    h, w, _ = project_point(pts, spec)
    H, W = spec.shape
    rows = np.floor(h).astype(np.int64)
    cols = np.floor(w).astype(np.int64) % W
    in_fov = (rows >= 0) & (rows < H)
    diag["out_of_fov"] = int((~in_fov).sum())
    rows, cols, d, inten = rows[in_fov], cols[in_fov], d[in_fov], inten[in_fov]
    pix = rows * W + cols
    # nearest return wins; ties broken by intensity so the result is order-free
    order = np.lexsort((inten, d, pix))
    pix, d, inten = pix[order], d[order], inten[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, d, inten = pix[first], d[first], inten[first]
    img.depth.flat[pix] = d
    img.intensity.flat[pix] = inten
    img.valid.flat[pix] = True
    img.raydrop_prob.flat[pix] = 0.0
    img.accum_alpha.flat[pix] = 1.0
    diag["binned"] = int(len(pix))
    return img


def rangeimage_to_points(img: RangeImage, pose: RigidTransform | None = None):
    """Back-project valid pixels through their pixel-center rays.

    Returns ``(points [N, 3], intensity [N])`` in the frame given by ``pose``
    (sensor frame when ``pose`` is None), ordered row-major by pixel.
    """
    if pose is not None and not isinstance(pose, RigidTransform):
        pose = RigidTransform(*pose)
    rays = pixel_rays(img.spec)
    mask = img.valid
    pts = rays[mask] * img.depth[mask][:, None]
    if pose is not None:
        pts = pose.apply(pts)
    return pts, img.intensity[mask].copy()


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"RVIM"
_VERSION = 1
_HEADER = struct.Struct("<4sIII5dI")


def save_rangeimage(img: RangeImage, path, channels: Sequence[str] = RangeImage.CHANNELS) -> None:
    """Write the flat little-endian container.

    Layout: magic ``RVIM``, u32 version, u32 H, u32 W, f64 f_up, f_down,
    range_min, range_max, divergence, u32 channel count, then one 16-byte
    NUL-padded ASCII name per channel, then row-major f32 planes in channel
    order.
    """
    s = img.spec
    buf = bytearray(
        _HEADER.pack(_MAGIC, _VERSION, s.beams, s.width, s.f_up, s.f_down, s.range_min, s.range_max, s.divergence, len(channels))
    )
    for name in channels:
        if name not in RangeImage.CHANNELS:
            raise DomainError(f"unknown channel {name!r}")
        buf += name.encode("ascii").ljust(16, b"\0")
    for name in channels:
        buf += np.ascontiguousarray(getattr(img, name), dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_rangeimage(path) -> RangeImage:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DomainError(f"{path}: truncated header")
    magic, version, H, W, f_up, f_down, rmin, rmax, div, nch = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != _VERSION:
        raise DomainError(f"{path}: not a range image container (magic={magic!r}, version={version})")
    spec = SensorSpec(H, W, f_up, f_down, rmin, rmax, div)
    off = _HEADER.size
    names = []
    for _ in range(nch):
        names.append(raw[off : off + 16].rstrip(b"\0").decode("ascii"))
        off += 16
    if len(raw) != off + nch * H * W * 4:
        raise DomainError(f"{path}: payload size mismatch")
    img = RangeImage.empty(spec)
    for name in names:
        plane = np.frombuffer(raw, dtype="<f4", count=H * W, offset=off).reshape(H, W)
        off += H * W * 4
        if name == "valid":
            img.valid = plane > 0.5
        else:
            setattr(img, name, plane.astype(np.float64))
    return img


def write_ply(path, points, intensity) -> None:
    """ASCII PLY with ``x y z intensity`` float properties, written losslessly."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inten = np.asarray(intensity, dtype=np.float64).reshape(-1)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property double x",
        "property double y",
        "property double z",
        "property double intensity",
        "end_header",
    ]
    lines += [f"{p[0]!r} {p[1]!r} {p[2]!r} {i!r}" for p, i in zip(pts.tolist(), inten.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise DomainError(f"{path}: not a PLY file")
        n = None
        props = []
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise DomainError(f"{path}: only ASCII PLY is supported")
            if tok[0] == "element" and tok[1] == "vertex":
                n = int(tok[2])
            elif tok[0] == "property":
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if n is None:
            raise DomainError(f"{path}: missing vertex element")
        data = np.loadtxt(f, dtype=np.float64, ndmin=2, max_rows=n) if n else np.zeros((0, len(props)))
    col = {name: i for i, name in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    inten = data[:, col["intensity"]] if "intensity" in col else np.zeros(len(pts))
    return pts, inten
