"""Losses, optimizer, densification and the training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ._geom import quat_to_rotmat
from .dynamics import build_tracks, decompose_frame, spawn_scene
from .field import Field, FieldConfig, init_from_points
from .grad import GradientBundle, backward
from .oracle import Dataset
from .rangeview import DomainError, RangeImage, RigidTransform, rangeimage_to_points
from .splat import Render, apply_raydrop, project_gaussians, rasterize

log = logging.getLogger(__name__)

PER_ANCHOR = ("positions", "features", "base_scale")


@dataclass
class TrainConfig:
    iterations: int = 7000
    seed: int = 0
    lambda_rho: float = 0.2
    # loss weights; zero disables a term
    w_intensity: float = 1.0
    w_depth: float = 1.0
    w_raydrop: float = 1.0
    w_alpha: float = 1.0
    w_scale: float = 1.0
    lr_positions: float = 1.6e-4
    lr_positions_final: float = 1.6e-6
    lr_features: float = 2.5e-3
    lr_base_scale: float = 1e-3
    lr_mlp: float = 2e-3
    lr_latents: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    init_anchors: int = 20000
    max_anchors: int = 50000
    densify_from: int = 500
    densify_until: int = 3000
    densify_interval: int = 100
    grad_threshold: float = 0.006
    voxel_size: float = 0.1
    prune_opacity: float = 0.005
    lambda_r: float = 0.5
    lambda_tau: float = 2.0
    tau_window: float = 0.3
    projection: str = "lbs"
    aabb: str = "compact"
    view_inputs: bool = True
    dtype: str = "float32"
    threads: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0
    diverge_factor: float = 10.0
    diverge_patience: int = 100

    def __post_init__(self):
        if self.iterations < 0:
            raise DomainError("iterations must be >= 0")
        if self.densify_until > self.iterations and self.iterations > 0:
            self.densify_until = self.iterations
        for f in dataclasses.fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise DomainError(f"{f.name} must be positive")

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {n}: unknown config key {key!r}")
            kw[key] = _parse_value(val, types[key], n)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _parse_value(val: str, typ, line: int):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if val.lower() in ("1", "true", "yes", "on"):
                return True
            if val.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(val)
        if typ == "int":
            return int(float(val)) if "e" in val.lower() else int(val)
        if typ == "float":
            return float(val)
        return val
    except ValueError:
        raise ValueError(f"line {line}: cannot parse {val!r} as {typ}") from None


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossReport:
    total: float
    intensity: float
    depth: float
    raydrop: float
    alpha: float
    scale: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_window_cache: dict = {}


def _ssim_window(dtype):
    if dtype not in _window_cache:
        x = torch.arange(11, dtype=torch.float64) - 5
        g = torch.exp(-(x**2) / (2 * 1.5**2))
        g = g / g.sum()
        _window_cache[dtype] = g.to(dtype)
    return _window_cache[dtype]


def ssim_map(x: torch.Tensor, y: torch.Tensor, c1: float = 0.01**2, c2: float = 0.03**2) -> torch.Tensor:
    """SSIM map with an 11x11 Gaussian window (sigma 1.5).

    Borders are padded by half-sample symmetric reflection (edge pixel
    repeated), the same convention as ``scipy.ndimage`` ``mode="reflect"``.
    """
    if min(x.shape) < 5:
        raise DomainError("SSIM needs images of at least 5x5 pixels")
    g = _ssim_window(x.dtype)

    def filt(img):
        t = torch.cat([img[:5].flip(0), img, img[-5:].flip(0)], 0)
        t = torch.cat([t[:, :5].flip(1), t, t[:, -5:].flip(1)], 1)[None, None]
        t = F.conv2d(t, g.reshape(1, 1, 11, 1))
        t = F.conv2d(t, g.reshape(1, 1, 1, 11))
        return t[0, 0]

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def _binary_entropy(a: torch.Tensor) -> torch.Tensor:
    a = a.clamp(0.0, 1.0)
    exact = -(torch.xlogy(a, a) + torch.xlogy(1 - a, 1 - a))
    ac = a.clamp(1e-6, 1 - 1e-6)
    smooth = -(ac * torch.log(ac) + (1 - ac) * torch.log(1 - ac))
    return exact.detach() + (smooth - smooth.detach())


def loss_total(r: Render, gt: RangeImage, cfg: TrainConfig) -> tuple[LossReport, dict[str, torch.Tensor]]:
    """Evaluate the loss stack on pre-threshold channels.

    Returns the report and the gradients of the total loss with respect to
    each rendered channel (``[H, W]``) and the spawned scales (``[N, 3]``).
    """
    if gt.spec.shape != r.spec.shape:
        raise DomainError("render and ground truth use different sensor specs")
    dtype = r.depth.dtype
    leaves = {k: v.detach().clone().requires_grad_() for k, v in r.channels().items()}
    scales = r.gaussians.scales.detach().clone().requires_grad_()
    valid = torch.as_tensor(gt.valid)
    vf = valid.to(dtype)
    nv = max(int(valid.sum()), 1)
    gt_i = torch.as_tensor(gt.intensity, dtype=dtype)
    gt_d = torch.as_tensor(gt.depth, dtype=dtype)
    gt_r = torch.as_tensor(gt.raydrop_prob, dtype=dtype)

    pred_i = leaves["intensity"] * vf
    l1_i = (torch.abs(pred_i - gt_i) * vf).sum() / nv
    dssim = ((1.0 - ssim_map(pred_i, gt_i)) * vf).sum() / nv
    l_int = (1 - cfg.lambda_rho) * l1_i + cfg.lambda_rho * dssim
    l_dep = (torch.abs(leaves["depth"] - gt_d) * vf).sum() / nv
    l_rd = ((leaves["raydrop"] - gt_r) ** 2).mean()
    l_a = _binary_entropy(leaves["alpha"]).mean()
    contrib = r.tape.contributing_gaussians()
    l_s = scales[contrib].prod(dim=1).mean() if len(contrib) else scales.sum() * 0.0

    terms = {
        "intensity": cfg.w_intensity * l_int,
        "depth": cfg.w_depth * l_dep,
        "raydrop": cfg.w_raydrop * l_rd,
        "alpha": cfg.w_alpha * l_a,
        "scale": cfg.w_scale * l_s,
    }
    total = sum(terms.values())
    inputs = list(leaves.values()) + [scales]
    grads = torch.autograd.grad(total, inputs, allow_unused=True) if total.requires_grad else [None] * len(inputs)
    upstream = {}
    for (k, leaf), gr in zip(list(leaves.items()) + [("scales", scales)], grads):
        upstream[k] = torch.zeros_like(leaf) if gr is None else gr
    rep = LossReport(float(total.detach()), *(float(terms[k].detach()) for k in ("intensity", "depth", "raydrop", "alpha", "scale")))
    return rep, upstream


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected adaptive-moment updates with per-group learning rates."""

    def __init__(self, cfg: TrainConfig, state: dict | None = None):
        self.cfg = cfg
        self.step_count = 0
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.rejected = 0
        if state:
            self.step_count = int(state["step"])
            self.m = dict(state["m"])
            self.v = dict(state["v"])

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def lr(self, key: str) -> float:
        c = self.cfg
        if key == "positions":
            T = max(c.iterations, 1)
            frac = min(self.step_count / T, 1.0)
            return c.lr_positions * (c.lr_positions_final / c.lr_positions) ** frac
        if key.startswith("mlp."):
            return c.lr_mlp
        return {"features": c.lr_features, "base_scale": c.lr_base_scale, "latents": c.lr_latents}[key]

    def step(self, fld: Field, grads: GradientBundle) -> bool:
        """Update ``fld`` in place. Returns False (and leaves everything untouched) on non-finite gradients."""
        if not grads.finite():
            self.rejected += 1
            return False
        params = fld.parameter_groups()
        for key in params:
            if grads.params[key].shape != params[key].shape:
                raise DomainError(f"gradient for {key} has shape {tuple(grads.params[key].shape)}, expected {tuple(params[key].shape)}")
        self.step_count += 1
        b1, b2, eps = self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps
        bc1 = 1 - b1**self.step_count
        bc2 = 1 - b2**self.step_count
        with torch.no_grad():
            for key, p in params.items():
                g = grads.params[key].to(p.dtype)
                m = self.m.get(key)
                if m is None or m.shape != p.shape:
                    m = torch.zeros_like(p)
                    self.v[key] = torch.zeros_like(p)
                v = self.v[key]
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.m[key], self.v[key] = m, v
                new = p - self.lr(key) * (m / bc1) / (torch.sqrt(v / bc2) + eps)
                if key == "base_scale":
                    new = new.clamp_min(1e-4)
                fld.set_parameter(key, new.detach().requires_grad_(p.requires_grad))
        fld.version += 1
        return True

    def remap_rows(self, keep: torch.Tensor, n_new: int) -> None:
        """Follow an anchor-set edit: keep rows ``keep`` then append ``n_new`` zero rows."""
        for key in PER_ANCHOR:
            for store in (self.m, self.v):
                if key in store:
                    t = store[key][keep]
                    store[key] = torch.cat([t, torch.zeros((n_new,) + t.shape[1:], dtype=t.dtype)])


def optimizer_step(fld: Field, opt: Adam, grads: GradientBundle) -> bool:
    return opt.step(fld, grads)


# ---------------------------------------------------------------------------
# densification


@dataclass
class DensifyStats:
    grad_accum: torch.Tensor
    count: torch.Tensor
    opacity_accum: torch.Tensor
    opacity_count: torch.Tensor
    last_offset: torch.Tensor
    last_scale: torch.Tensor
    last_axis: torch.Tensor

    @staticmethod
    def empty(n: int, dtype=torch.float64) -> "DensifyStats":
        z = lambda *s: torch.zeros(s, dtype=dtype)
        return DensifyStats(z(n), z(n), z(n), z(n), z(n, 3), z(n, 3), z(n, 3))

    def update(self, grads: GradientBundle, r: Render) -> None:
        vis = grads.visible
        self.grad_accum += grads.abs_screen_grad.to(self.grad_accum.dtype)
        self.count += vis.to(self.count.dtype)
        g = r.gaussians
        ai = g.anchor_index
        with torch.no_grad():
            seen = torch.zeros(len(g), dtype=torch.bool)
            if len(r.tape):
                seen[r.tape.gaussian] = True
            a = ai[seen]
            self.opacity_accum.index_add_(0, a, g.opacity.detach()[seen].to(self.opacity_accum.dtype))
            self.opacity_count.index_add_(0, a, torch.ones(len(a), dtype=self.opacity_count.dtype))
            if g.offsets is not None:
                self.last_offset[ai] = g.offsets.detach().to(self.last_offset.dtype)
            sc = g.scales.detach().to(self.last_scale.dtype)
            self.last_scale[ai] = sc
            R = quat_to_rotmat(g.quats.detach().to(self.last_axis.dtype))
            k = sc.argmax(dim=1)
            self.last_axis[ai] = R[torch.arange(len(g)), :, k]


def densify(fld: Field, stats: DensifyStats, cfg: TrainConfig, opt: Adam | None = None, iteration: int = 0) -> dict:
    """Grow, split and prune anchors from accumulated statistics.

    Anchors whose mean absolute screen gradient exceeds the threshold are
    split (two children at +-0.5 scale along the principal axis, base scale
    x0.6, parent removed) when their largest scale exceeds ``voxel_size``,
    otherwise grown (one child at the Gaussian mean shifted by its offset).
    Anchors with mean opacity below ``prune_opacity`` are removed. New
    anchors are capped at ``max_anchors`` in order of (gradient desc,
    index asc).
    """
    n = len(fld)
    if iteration > cfg.densify_until:
        return {"split": 0, "grown": 0, "pruned": 0, "anchors": n}
    avg = stats.grad_accum / stats.count.clamp_min(1)
    cand = torch.nonzero((stats.count > 0) & (avg > cfg.grad_threshold)).reshape(-1)
    mean_op = stats.opacity_accum / stats.opacity_count.clamp_min(1)
    prune = (stats.opacity_count > 0) & (mean_op < cfg.prune_opacity)
    # candidates being pruned are not densified
    cand = cand[~prune[cand]]
    order = sorted(cand.tolist(), key=lambda i: (-float(avg[i]), i))
    room = max(cfg.max_anchors - (n - int(prune.sum())), 0)
    order = order[:room]
    splits = [i for i in order if float(stats.last_scale[i].max()) > cfg.voxel_size]
    grows = [i for i in order if float(stats.last_scale[i].max()) <= cfg.voxel_size]

    with torch.no_grad():
        dt = fld.dtype
        new_pos, new_feat, new_base, new_owner = [], [], [], []
        for i in splits:
            center = fld.positions[i] + stats.last_offset[i].to(dt)
            step = 0.5 * stats.last_scale[i].max().to(dt) * stats.last_axis[i].to(dt)
            for sgn in (1.0, -1.0):
                new_pos.append(center + sgn * step)
                new_feat.append(fld.features[i])
                new_base.append(fld.base_scale[i] * 0.6)
                new_owner.append(int(fld.owner[i]))
        for i in grows:
            new_pos.append(fld.positions[i] + 2.0 * stats.last_offset[i].to(dt))
            new_feat.append(fld.features[i])
            new_base.append(fld.base_scale[i])
            new_owner.append(int(fld.owner[i]))
        remove = prune.clone()
        if splits:
            remove[torch.as_tensor(splits)] = True
        keep = torch.nonzero(~remove).reshape(-1)
        k = len(new_pos)

        def merged(old, new, shape):
            parts = [old[keep]]
            if k:
                parts.append(torch.stack(new).reshape((k,) + shape))
            return torch.cat(parts)

        fld.positions = merged(fld.positions.detach(), new_pos, (3,)).requires_grad_(fld.positions.requires_grad)
        fld.features = merged(fld.features.detach(), new_feat, (fld.config.feature_dim,)).requires_grad_(fld.features.requires_grad)
        fld.base_scale = merged(fld.base_scale.detach(), new_base, (3,)).requires_grad_(fld.base_scale.requires_grad)
        fld.owner = torch.cat([fld.owner[keep], torch.as_tensor(new_owner, dtype=fld.owner.dtype)])
    if opt is not None:
        opt.remap_rows(keep, k)
    fld.version += 1
    seen = avg[stats.count > 0]
    q = torch.quantile(seen.double(), torch.tensor([0.5, 0.99], dtype=torch.float64)).tolist() if len(seen) else [0.0, 0.0]
    return {"split": len(splits), "grown": len(grows), "pruned": int(prune.sum()), "anchors": len(fld), "grad_p50": q[0], "grad_p99": q[1]}


# ---------------------------------------------------------------------------
# training loop


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    field: Field
    optimizer: Adam
    curves: list[dict] = field(default_factory=list)
    densify_log: list[dict] = field(default_factory=list)


def setup_torch(cfg: TrainConfig) -> None:
    if cfg.threads > 0:
        torch.set_num_threads(cfg.threads)
    torch.use_deterministic_algorithms(bool(cfg.deterministic), warn_only=True)


def instance_poses_for(ds: Dataset, frame: int, tracks=None) -> dict[int, RigidTransform]:
    tracks = tracks if tracks is not None else build_tracks(ds.tracks)
    return {iid: tr.poses[frame] for iid, tr in tracks.items() if frame in tr.poses}


def initial_points(ds: Dataset, frames=None):
    """World-frame static points and canonical instance points from the given frames."""
    frames = ds.train_idx if frames is None else frames
    static_pts, static_int, inst = [], [], {}
    for f in frames:
        pts, inten = rangeimage_to_points(ds.frames[f], ds.poses[f])
        s, si, per = decompose_frame(pts, inten, ds.tracks_for(f))
        static_pts.append(s)
        static_int.append(si)
        for iid, (p, i) in per.items():
            inst.setdefault(iid, []).append(p)
    return np.concatenate(static_pts), np.concatenate(static_int), {k: np.concatenate(v) for k, v in inst.items()}


def init_field(ds: Dataset, cfg: TrainConfig) -> Field:
    static, _, inst = initial_points(ds)
    ids = sorted(k for k, v in inst.items() if len(v))
    pts = [static] + [inst[i] for i in ids]
    owner = np.concatenate([np.full(len(p), g) for g, p in enumerate(pts)])
    allp = np.concatenate(pts)
    fcfg = FieldConfig(range_max=ds.spec.range_max, view_inputs=cfg.view_inputs)
    count = min(cfg.init_anchors, cfg.max_anchors)
    return init_from_points(allp, count, n_frames=len(ds.frames), cfg=fcfg, seed=cfg.seed, dtype=cfg.torch_dtype, owner=owner, instance_ids=ids)


def latent_frame_for(fld_frames: int, frame: int, train_idx: list[int]) -> int:
    """Latent index used to render ``frame``: itself if trained, else the nearest training frame."""
    if frame in train_idx or not train_idx:
        return frame
    return min(train_idx, key=lambda t: (abs(t - frame), t))


def render_frame(fld: Field, spec, pose: RigidTransform, latent_frame: int, instance_poses=None, cfg: TrainConfig | None = None) -> Render:
    cfg = cfg or TrainConfig()
    g = spawn_scene(fld, pose, latent_frame, instance_poses, cull_range=spec.range_max)
    proj = project_gaussians(g, pose, spec, mode=cfg.projection, aabb=cfg.aabb)
    return rasterize(proj, g, spec, version=fld.version)


def render_image(fld: Field, spec, pose: RigidTransform, latent_frame: int, instance_poses=None, cfg: TrainConfig | None = None) -> RangeImage:
    """Final scan: render and apply the ray-drop decision."""
    cfg = cfg or TrainConfig()
    with torch.no_grad():
        r = render_frame(fld, spec, pose, latent_frame, instance_poses, cfg)
    return apply_raydrop(r.to_rangeimage(), r.tape, cfg.lambda_r, cfg.lambda_tau, cfg.tau_window)


def train_scene(ds: Dataset, cfg: TrainConfig, fld: Field | None = None, progress=None) -> TrainResult:
    """Fit a field to the training frames of ``ds``."""
    if not ds.train_idx:
        raise DomainError("dataset has no training frames")
    setup_torch(cfg)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    fld = fld if fld is not None else init_field(ds, cfg)
    fld.requires_grad_(True)
    opt = Adam(cfg)
    res = TrainResult(fld, opt)
    tracks = build_tracks(ds.tracks)
    stats = DensifyStats.empty(len(fld))
    order: list[int] = []
    t0 = time.perf_counter()
    first_total = None
    over = 0
    for it in range(1, cfg.iterations + 1):
        if not order:
            order = list(rng.permutation(ds.train_idx))
        f = int(order.pop())
        pose = ds.poses[f]
        r = render_frame(fld, ds.spec, pose, f, instance_poses_for(ds, f, tracks), cfg)
        rep, upstream = loss_total(r, ds.frames[f], cfg)
        grads = backward(r, upstream, fld)
        stats.update(grads, r)
        opt.step(fld, grads)
        row = {"iteration": it, "frame": f, **rep.as_dict(), "anchors": len(fld), "time": time.perf_counter() - t0}
        res.curves.append(row)
        if first_total is None:
            first_total = rep.total
        over = over + 1 if (not math.isfinite(rep.total) or rep.total > cfg.diverge_factor * first_total) else 0
        if over >= cfg.diverge_patience:
            raise TrainingDiverged(
                f"loss above {cfg.diverge_factor}x its initial value ({first_total:.4g}) for {over} iterations; last {rep.total:.4g} at iteration {it}"
            )
        if cfg.densify_from <= it <= cfg.densify_until and it % cfg.densify_interval == 0:
            info = densify(fld, stats, cfg, opt, it)
            info["iteration"] = it
            res.densify_log.append(info)
            stats = DensifyStats.empty(len(fld))
        if progress is not None:
            progress(it, row)
    fld.requires_grad_(False)
    return res


# ---------------------------------------------------------------------------
# full-pipeline gradient check


def gradcheck_fixture(seed: int = 0, n_gaussians: int = 20, beams: int = 8, width: int = 32):
    """Small float64 scene for finite-difference checks: field, spec, pose and target image."""
    from .field import FieldConfig, init_mlps
    from .rangeview import SensorSpec

    rng = np.random.default_rng(seed)
    # a wide divergence cone so footprints overlap across the coarse pixel grid
    spec = SensorSpec(beams, width, 0.26, 0.26, range_min=1.0, range_max=30.0, divergence=0.3)
    az = rng.uniform(-np.pi, np.pi, n_gaussians)
    el = rng.uniform(-0.2, 0.2, n_gaussians)
    d = rng.uniform(4.0, 12.0, n_gaussians)
    pts = np.stack([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)], 1) * d[:, None]
    fcfg = FieldConfig(range_max=spec.range_max)
    fld = init_from_points(pts, n_gaussians, n_frames=1, cfg=fcfg, seed=seed, dtype=torch.float64)
    with torch.no_grad():
        fld.positions = torch.as_tensor(pts, dtype=torch.float64)
        fld.features = torch.as_tensor(rng.normal(0, 0.5, fld.features.shape))
        fld.latents = torch.as_tensor(rng.normal(0, 0.5, fld.latents.shape))
        fld.base_scale = torch.as_tensor(rng.uniform(0.4, 0.9, (n_gaussians, 3)))
        fld.mlps = init_mlps(fcfg, rng, torch.float64)
    H, W = spec.shape
    valid = rng.random((H, W)) < 0.8
    gt = RangeImage(
        spec,
        depth=np.where(valid, rng.uniform(4, 12, (H, W)), 0.0),
        intensity=np.where(valid, rng.uniform(0, 1, (H, W)), 0.0),
        raydrop_prob=(~valid).astype(np.float64),
        accum_alpha=valid.astype(np.float64),
        valid=valid,
    )
    return fld, spec, RigidTransform(), gt


def pipeline_gradcheck(seed: int = 0, eps: float = 1e-6, per_group: int = 6, cfg: TrainConfig | None = None, fixture=None):
    """Compare reverse-mode gradients of the full training loss against central differences.

    The pair list and termination pattern of the base render are replayed
    for every perturbed evaluation, so the check covers the smooth part of
    the pipeline: spawning MLPs, projection, kernels and compositing. The
    ray-drop decision never enters the loss.
    """
    from .grad import FDReport, finite_diff_check

    cfg = cfg or TrainConfig(dtype="float64")
    fld, spec, pose, gt = fixture if fixture is not None else gradcheck_fixture(seed)
    fld.requires_grad_(True)

    def forward(reuse=None):
        g = spawn_scene(fld, pose, 0, None, cull_range=None)
        proj = project_gaussians(g, pose, spec, mode=cfg.projection, aabb=cfg.aabb)
        return rasterize(proj, g, spec, version=fld.version, reuse=reuse)

    base = forward()
    if len(base.tape) == 0:
        raise DomainError("gradient-check scene renders nothing")
    _, upstream = loss_total(base, gt, cfg)
    bundle = backward(base, upstream, fld)
    fld.requires_grad_(False)
    rng = np.random.default_rng(seed + 1)
    params = fld.parameter_groups()
    groups: dict[str, list[str]] = {}
    for key in params:
        groups.setdefault(".".join(key.split(".")[:2]) if key.startswith("mlp.") else key, []).append(key)

    per, worst_all, rel_all = {}, (), []
    for gname, keys in groups.items():
        cand = []
        for key in keys:
            a = bundle.params[key].reshape(-1).numpy()
            for i in np.nonzero(np.abs(a) > 0)[0]:
                cand.append((key, int(i), abs(float(a[i]))))
        if not cand:
            per[gname] = {"max_rel": float("nan"), "n": 0}
            continue
        top = max(c[2] for c in cand)
        cand = [c for c in cand if c[2] > 1e-3 * top]
        pick = rng.choice(len(cand), size=min(per_group, len(cand)), replace=False)
        gmax, n = 0.0, 0
        for j in sorted(pick):
            key, i, _ = cand[j]
            orig = params[key].detach().clone()

            def loss_fn(x, key=key, orig=orig):
                fld.set_parameter(key, torch.as_tensor(x).reshape(orig.shape))
                rep, _ = loss_total(forward(reuse=base.tape), gt, cfg)
                return rep.total

            try:
                rep = finite_diff_check(loss_fn, orig.numpy(), bundle.params[key].numpy(), eps=eps, coords=[i])
            finally:
                fld.set_parameter(key, orig)
            rel_all.append(rep.max_rel)
            n += 1
            if rep.max_rel >= gmax:
                gmax = rep.max_rel
            if not worst_all or rep.max_rel >= worst_all[0]:
                worst_all = (rep.max_rel, key) + rep.worst
        per[gname] = {"max_rel": gmax, "n": n}
    return FDReport(
        max(rel_all) if rel_all else 0.0,
        float(np.mean(rel_all)) if rel_all else 0.0,
        worst_all,
        per,
        checked=len(rel_all),
    )
