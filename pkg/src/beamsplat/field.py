"""Neural Gaussian field: anchors, per-frame latent codes and attribute MLPs.

Each anchor spawns one Gaussian per view. Four small MLPs map the anchor
feature plus view inputs (direction and flight distance from the sensor) to
the Gaussian attributes:

* ``cov``: position offset, rotation and scale
* ``intensity``: reflected intensity (also sees the frame latent)
* ``raydrop``: ray-drop probability (also sees the frame latent)
* ``opacity``: opacity
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from .rangeview import DomainError

MLP_NAMES = ("cov", "intensity", "raydrop", "opacity")
_OUT_DIMS = {"cov": 10, "intensity": 1, "raydrop": 1, "opacity": 1}
_USES_LATENT = {"cov": False, "intensity": True, "raydrop": True, "opacity": False}

CHECKPOINT_VERSION = 1


@dataclass
class FieldConfig:
    feature_dim: int = 32
    latent_dim: int = 16
    hidden: int = 64
    n_freqs: int = 4
    range_max: float = 60.0
    scale_max: float = 4.0
    min_scale: float = 1e-6
    # Multiple of base_scale bounding the learned position offset.
    offset_bound: float = 2.0
    view_inputs: bool = True

    @property
    def view_dim(self) -> int:
        return 3 + 1 + 6 * self.n_freqs

    def in_dim(self, name: str) -> int:
        return self.feature_dim + self.view_dim + (self.latent_dim if _USES_LATENT[name] else 0)


@dataclass
class Gaussians:
    """Spawned per-view primitives (struct of arrays)."""

    means: torch.Tensor
    quats: torch.Tensor
    scales: torch.Tensor
    intensity: torch.Tensor
    raydrop: torch.Tensor
    opacity: torch.Tensor
    anchor_index: torch.Tensor
    offsets: torch.Tensor | None = None
    skipped: int = 0

    def __len__(self) -> int:
        return int(self.means.shape[0])

    @staticmethod
    def concat(parts: list["Gaussians"]) -> "Gaussians":
        def cat(name):
            vals = [getattr(p, name) for p in parts]
            if any(v is None for v in vals):
                return None
            return torch.cat(vals, dim=0)

        return Gaussians(
            *(cat(n) for n in ("means", "quats", "scales", "intensity", "raydrop", "opacity", "anchor_index", "offsets")),
            skipped=sum(p.skipped for p in parts),
        )

    @staticmethod
    def from_arrays(means, quats, scales, intensity, raydrop, opacity, dtype=torch.float64) -> "Gaussians":
        t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=dtype)
        n = len(np.asarray(means))
        return Gaussians(
            t(means).reshape(n, 3),
            t(quats).reshape(n, 4),
            t(scales).reshape(n, 3),
            t(intensity).reshape(n),
            t(raydrop).reshape(n),
            t(opacity).reshape(n),
            torch.arange(n),
        )


@dataclass
class Field:
    """Learnable scene state.

    ``owner`` maps each anchor to a latent group: 0 is the static background,
    group ``k >= 1`` is ``instance_ids[k - 1]`` whose anchors live in that
    instance's canonical frame. ``latents`` has shape ``[groups, frames, L]``.
    """

    positions: torch.Tensor
    features: torch.Tensor
    base_scale: torch.Tensor
    owner: torch.Tensor
    latents: torch.Tensor
    mlps: dict[str, list[tuple[torch.Tensor, torch.Tensor]]]
    config: FieldConfig = field(default_factory=FieldConfig)
    instance_ids: list[int] = field(default_factory=list)
    version: int = 0

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    @property
    def dtype(self):
        return self.positions.dtype

    @property
    def n_frames(self) -> int:
        return int(self.latents.shape[1])

    def parameter_groups(self) -> dict[str, torch.Tensor]:
        """Named leaf tensors, in a fixed order."""
        out = {
            "positions": self.positions,
            "features": self.features,
            "base_scale": self.base_scale,
            "latents": self.latents,
        }
        for name in MLP_NAMES:
            for i, (W, b) in enumerate(self.mlps[name]):
                out[f"mlp.{name}.{i}.W"] = W
                out[f"mlp.{name}.{i}.b"] = b
        return out

    def set_parameter(self, key: str, value: torch.Tensor) -> None:
        if key.startswith("mlp."):
            _, name, i, kind = key.split(".")
            W, b = self.mlps[name][int(i)]
            self.mlps[name][int(i)] = (value, b) if kind == "W" else (W, value)
        else:
            setattr(self, key, value)

    def requires_grad_(self, flag: bool = True) -> "Field":
        for key, t in self.parameter_groups().items():
            if t.requires_grad != flag:
                self.set_parameter(key, t.detach().requires_grad_(flag))
        return self

    def zero_grad(self) -> None:
        for t in self.parameter_groups().values():
            t.grad = None

    def group_of(self, instance_id: int | None) -> int:
        return 0 if instance_id is None else self.instance_ids.index(instance_id) + 1

    def clone(self) -> "Field":
        return Field(
            self.positions.detach().clone(),
            self.features.detach().clone(),
            self.base_scale.detach().clone(),
            self.owner.clone(),
            self.latents.detach().clone(),
            {n: [(W.detach().clone(), b.detach().clone()) for W, b in layers] for n, layers in self.mlps.items()},
            FieldConfig(**asdict(self.config)),
            list(self.instance_ids),
            self.version,
        )

    def to(self, dtype) -> "Field":
        f = self.clone()
        for key, t in f.parameter_groups().items():
            f.set_parameter(key, t.to(dtype))
        return f


def init_mlps(cfg: FieldConfig, rng: np.random.Generator, dtype=torch.float32):
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    mlps = {}
    for name in MLP_NAMES:
        dims = [cfg.in_dim(name), cfg.hidden, cfg.hidden, _OUT_DIMS[name]]
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(a)
            W = torch.as_tensor(rng.uniform(-bound, bound, size=(a, b)), dtype=dtype)
            bias = torch.as_tensor(rng.uniform(-bound, bound, size=(b,)), dtype=dtype)
            layers.append((W, bias))
        mlps[name] = layers
    return mlps


def knn_scale(points: np.ndarray, k: int = 3, lo: float = 0.01, hi: float = 2.0) -> np.ndarray:
    """Distance to the k-th nearest other point, clamped to ``[lo, hi]``."""
    n = len(points)
    if n <= 1:
        return np.full(n, hi)
    kk = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    return np.clip(dist[:, kk], lo, hi)


def init_from_points(
    points,
    count: int,
    n_frames: int = 1,
    cfg: FieldConfig | None = None,
    seed: int = 0,
    dtype=torch.float32,
    owner=None,
    instance_ids: list[int] | None = None,
) -> Field:
    """Sample ``count`` anchors from a point cloud.

    When ``count`` equals the cloud size the anchors are the points
    themselves, in order. Smaller counts sample without replacement, larger
    ones with replacement. ``owner`` optionally gives each input point's
    latent group.
    """
    cfg = cfg or FieldConfig()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise DomainError("cannot initialize a field from an empty point cloud")
    if count <= 0:
        raise DomainError(f"anchor count must be positive, got {count}")
    rng = np.random.default_rng(seed)
    if count == len(pts):
        idx = np.arange(count)
    else:
        idx = np.sort(rng.choice(len(pts), size=count, replace=count > len(pts)))
    anchors = pts[idx]
    own = np.zeros(count, dtype=np.int64) if owner is None else np.asarray(owner, dtype=np.int64)[idx]
    base = np.empty(count)
    for g in np.unique(own):
        m = own == g
        base[m] = knn_scale(anchors[m])
    n_groups = 1 + len(instance_ids or [])
    t = lambda a: torch.as_tensor(a, dtype=dtype)
    return Field(
        positions=t(anchors),
        features=t(rng.uniform(-0.005, 0.005, size=(count, cfg.feature_dim))),
        base_scale=t(np.repeat(base[:, None], 3, axis=1)),
        owner=torch.as_tensor(own),
        latents=t(rng.uniform(-0.005, 0.005, size=(n_groups, n_frames, cfg.latent_dim))),
        mlps=init_mlps(cfg, rng, dtype),
        config=cfg,
        instance_ids=list(instance_ids or []),
    )


def mlp_forward(layers, x: torch.Tensor) -> torch.Tensor:
    for i, (W, b) in enumerate(layers):
        x = x @ W + b
        if i < len(layers) - 1:
            x = torch.relu(x)
    return x


def view_encoding(dirs: torch.Tensor, dist: torch.Tensor, cfg: FieldConfig) -> torch.Tensor:
    """Unit direction, normalized distance and a sinusoidal encoding of the direction."""
    feats = [dirs, (dist / cfg.range_max)[:, None]]
    for k in range(cfg.n_freqs):
        arg = (2.0**k) * np.pi * dirs
        feats += [torch.sin(arg), torch.cos(arg)]
    enc = torch.cat(feats, dim=1)
    if not cfg.view_inputs:
        enc = torch.zeros_like(enc)
    return enc


def spawn(fld: Field, viewpoint, latent: torch.Tensor, index: torch.Tensor | None = None) -> Gaussians:
    """Spawn one view-conditioned Gaussian per anchor.

    ``viewpoint`` and the anchors must be in the same frame. ``latent`` is a
    single code ``[L]`` or one per anchor ``[N, L]``. ``index`` restricts the
    call to a subset of anchors. Anchors coincident with the viewpoint are
    skipped and counted in ``Gaussians.skipped``.
    """
    cfg = fld.config
    idx = torch.arange(len(fld)) if index is None else index
    if len(idx) == 0:
        raise DomainError("spawn needs at least one anchor")
    o = torch.as_tensor(np.asarray(viewpoint, dtype=np.float64), dtype=fld.dtype)
    if o.dim() == 1:
        o = o.expand(len(idx), 3)
    pos = fld.positions[idx]
    rel = pos - o
    dist = torch.linalg.norm(rel, dim=1)
    ok = dist.detach() > 1e-9
    skipped = int((~ok).sum())
    if skipped:
        idx, pos, rel, dist, o = idx[ok], pos[ok], rel[ok], dist[ok], o[ok]
        if latent.dim() == 2:
            latent = latent[ok]
    dirs = rel / dist[:, None]
    feat = fld.features[idx]
    base = fld.base_scale[idx]
    view = view_encoding(dirs, dist, cfg)
    x0 = torch.cat([feat, view], dim=1)
    lat = latent.expand(len(idx), cfg.latent_dim) if latent.dim() == 1 else latent
    x1 = torch.cat([x0, lat], dim=1)

    cov = mlp_forward(fld.mlps["cov"], x0)
    offsets = torch.tanh(cov[:, 0:3]) * cfg.offset_bound * base
    q = cov[:, 3:7] + torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=cov.dtype)
    quats = q / torch.linalg.norm(q, dim=1, keepdim=True).clamp_min(1e-12)
    scales = (F.softplus(cov[:, 7:10]) * base).clamp(cfg.min_scale, cfg.scale_max)
    intensity = torch.sigmoid(mlp_forward(fld.mlps["intensity"], x1)[:, 0])
    raydrop = torch.sigmoid(mlp_forward(fld.mlps["raydrop"], x1)[:, 0])
    opacity = torch.sigmoid(mlp_forward(fld.mlps["opacity"], x0)[:, 0])
    return Gaussians(pos + offsets, quats, scales, intensity, raydrop, opacity, idx, offsets, skipped)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, fld: Field, optimizer_state: dict | None = None, extra: dict | None = None) -> None:
    """Write an uncompressed ``.npz`` archive readable with numpy alone.

    Keys: ``format_version``, ``config`` (JSON text), ``instance_ids``,
    ``positions [N,3]``, ``features [N,F]``, ``base_scale [N,3]``,
    ``owner [N]``, ``latents [G,T,L]``, ``mlp/<name>/<layer>/W`` and ``/b``
    (``x @ W + b`` with ReLU between layers), and optionally
    ``adam/step`` plus ``adam/m/<param>`` / ``adam/v/<param>`` moments and
    ``extra`` (JSON text).
    """
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "config": np.array(json.dumps(asdict(fld.config))),
        "instance_ids": np.asarray(fld.instance_ids, dtype=np.int64),
        "version": np.array(fld.version),
        "owner": fld.owner.numpy().astype(np.int64),
    }
    for key, t in fld.parameter_groups().items():
        if key.startswith("mlp."):
            _, name, i, kind = key.split(".")
            arrays[f"mlp/{name}/{i}/{kind}"] = t.detach().numpy()
        else:
            arrays[key] = t.detach().numpy()
    if optimizer_state:
        arrays["adam/step"] = np.array(optimizer_state["step"])
        for k, v in optimizer_state["m"].items():
            arrays[f"adam/m/{k}"] = v.detach().numpy()
        for k, v in optimizer_state["v"].items():
            arrays[f"adam/v/{k}"] = v.detach().numpy()
    if extra is not None:
        arrays["extra"] = np.array(json.dumps(extra))
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path, dtype=torch.float32):
    """Return ``(field, optimizer_state | None, extra | None)``."""
    with np.load(path, allow_pickle=False) as z:
        if int(z["format_version"]) != CHECKPOINT_VERSION:
            raise DomainError(f"{path}: unsupported checkpoint version {int(z['format_version'])}")
        cfg = FieldConfig(**json.loads(str(z["config"])))
        t = lambda a: torch.as_tensor(np.array(a), dtype=dtype)
        mlps = {}
        for name in MLP_NAMES:
            layers = []
            i = 0
            while f"mlp/{name}/{i}/W" in z.files:
                layers.append((t(z[f"mlp/{name}/{i}/W"]), t(z[f"mlp/{name}/{i}/b"])))
                i += 1
            mlps[name] = layers
        fld = Field(
            t(z["positions"]),
            t(z["features"]),
            t(z["base_scale"]),
            torch.as_tensor(np.array(z["owner"])),
            t(z["latents"]),
            mlps,
            cfg,
            [int(v) for v in z["instance_ids"]],
            int(z["version"]),
        )
        opt = None
        if "adam/step" in z.files:
            opt = {"step": int(z["adam/step"]), "m": {}, "v": {}}
            for key in z.files:
                if key.startswith("adam/m/"):
                    opt["m"][key[7:]] = t(z[key])
                elif key.startswith("adam/v/"):
                    opt["v"][key[7:]] = t(z[key])
        extra = json.loads(str(z["extra"])) if "extra" in z.files else None
    return fld, opt, extra
