"""Laser-beam splatting: micro cross-section projection and range-view compositing.

Each Gaussian is projected onto the plane through its mean perpendicular to
its viewing ray. A pixel's ray is related to the Gaussian through the
in-plane offset of the ray's closest approach to the mean, and pixels are
composited front to back by flight distance.

The rasterizer works on (Gaussian, pixel) pairs: every Gaussian enumerates
the pixels of its bounding box, pairs outside the beam-divergence cone are
discarded, and the survivors are sorted by (pixel, flight distance). The
pair list together with the per-pair alpha and transmittance forms the
contribution tape.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ._geom import quat_to_rotmat
from .field import Gaussians
from .rangeview import DomainError, RangeImage, RigidTransform, SensorSpec, pixel_rays

T_MIN = 1e-4
# pairs fainter than this are skipped, as in standard splatting rasterizers
ALPHA_SKIP = 1.0 / 255.0
COV_FLOOR = 1e-7
# alpha is capped just below one inside logarithms
ALPHA_CAP = 1.0 - 1e-15

_render_ids = itertools.count(1)
_ray_cache: dict = {}


def _rays_tensor(spec: SensorSpec, dtype) -> torch.Tensor:
    key = (spec, dtype)
    if key not in _ray_cache:
        _ray_cache[key] = torch.as_tensor(pixel_rays(spec).reshape(-1, 3), dtype=dtype)
    return _ray_cache[key]


# ---------------------------------------------------------------------------
# micro-plane geometry


def plane_basis(dirs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched right-handed frame ``(n1, n2, d')`` for unit directions ``[N, 3]``."""
    dx, dy, dz = dirs.unbind(-1)
    zero = torch.zeros_like(dx)
    primary = torch.stack([-dy, dx, zero], dim=-1)  # (0, 0, 1) x d'
    fallback = torch.stack([zero, -dz, dy], dim=-1)  # (1, 0, 0) x d'
    use_fb = torch.linalg.norm(primary.detach(), dim=-1) < 1e-6
    c = torch.where(use_fb[:, None], fallback, primary)
    n1 = c / torch.linalg.norm(c, dim=-1, keepdim=True)
    n2 = torch.linalg.cross(dirs, n1, dim=-1)
    return n1, n2


def micro_plane_basis(direction) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis of the plane perpendicular to a unit direction.

    ``n1 = normalize(z_up x d')``, falling back to the x axis as "up" when
    ``d'`` is (anti)parallel to z; ``n2 = d' x n1`` so ``(n1, n2, d')`` is
    right-handed.
    """
    d = np.asarray(direction, dtype=np.float64)
    if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise DomainError("micro_plane_basis expects a unit 3-vector")
    n1, n2 = plane_basis(torch.as_tensor(d[None]))
    return n1[0].numpy(), n2[0].numpy()


@dataclass
class Projected:
    """Per-view projection of a Gaussian batch (sensor frame)."""

    means: torch.Tensor
    dist: torch.Tensor
    dirs: torch.Tensor
    n1: torch.Tensor
    n2: torch.Tensor
    cov2d: torch.Tensor
    conic: torch.Tensor
    center_hw: np.ndarray
    rows: np.ndarray  # [N, 2] inclusive row range
    cols: np.ndarray  # [N, 2] inclusive, unwrapped column range
    visible: np.ndarray
    culled: dict
    mode: str = "lbs"
    # pseudo-plane mode only
    face: np.ndarray | None = None
    uv: torch.Tensor | None = None
    conic_img: torch.Tensor | None = None

    def __len__(self) -> int:
        return int(self.dist.shape[0])


def _to_sensor(g: Gaussians, pose: RigidTransform | None):
    Rg = quat_to_rotmat(g.quats)
    if pose is None:
        return g.means, Rg
    Rt = torch.as_tensor(pose.rotation.T, dtype=g.means.dtype)
    t = torch.as_tensor(pose.translation, dtype=g.means.dtype)
    return (g.means - t) @ Rt.T, Rt @ Rg


def project_gaussians(
    g: Gaussians,
    pose: RigidTransform | None,
    spec: SensorSpec,
    mode: str = "lbs",
    aabb: str = "compact",
    gate_divergence: bool = True,
) -> Projected:
    """Project a batch of Gaussians for one sensor pose.

    ``cov2d = B^T Sigma B`` with ``B = [n1 n2]`` the micro-plane basis
    (plus a 1e-7 diagonal floor). ``aabb="compact"`` bounds the 3-sigma
    ellipse per image axis; ``aabb="radius"`` uses the 3-sigma major radius
    in both directions. ``mode="pseudo"`` additionally prepares the
    four-face pinhole approximation used for ablations.
    """
    if mode not in ("lbs", "pseudo"):
        raise ValueError(f"unknown projection mode {mode!r}")
    if aabb not in ("compact", "radius"):
        raise ValueError(f"unknown aabb mode {aabb!r}")
    means, Rg = _to_sensor(g, pose)
    dist = torch.linalg.norm(means, dim=1)
    dirs = means / dist.clamp_min(1e-12)[:, None]
    n1, n2 = plane_basis(dirs)
    B = torch.stack([n1, n2], dim=-1)  # [N, 3, 2]
    M = Rg.transpose(1, 2) @ B  # [N, 3, 2]
    s2 = g.scales * g.scales
    eye2 = torch.eye(2, dtype=means.dtype)
    cov2d = (M.transpose(1, 2) * s2[:, None, :]) @ M + COV_FLOOR * eye2
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([torch.stack([c, -b], -1), torch.stack([-b, a], -1)], -2) / det[:, None, None]

    H, W = spec.shape
    with torch.no_grad():
        dn = dist.numpy().astype(np.float64)
        mn = means.detach().numpy().astype(np.float64)
        cn = cov2d.detach().numpy().astype(np.float64)
    safe = np.maximum(dn, 1e-12)
    elev = np.arcsin(np.clip(mn[:, 2] / safe, -1, 1))
    azim = np.arctan2(mn[:, 1], mn[:, 0])
    h = (1.0 - (elev + spec.f_down) / spec.f_v) * H
    w = 0.5 * (1.0 - azim / np.pi) * W
    w = np.where(w >= W, w - W, w)
    tan_e, tan_a = math.tan(spec.d_elev), math.tan(spec.d_azim)
    if aabb == "compact":
        sig_w = 3.0 * np.sqrt(cn[:, 0, 0])
        sig_h = 3.0 * np.sqrt(cn[:, 1, 1])
    else:
        tr, dt = cn[:, 0, 0] + cn[:, 1, 1], cn[:, 0, 0] * cn[:, 1, 1] - cn[:, 0, 1] ** 2
        lmax = 0.5 * tr + np.sqrt(np.maximum(0.25 * tr * tr - dt, 0.0))
        sig_w = sig_h = 3.0 * np.sqrt(lmax)
    with np.errstate(invalid="ignore", over="ignore"):
        bh = np.ceil(sig_h / (safe * tan_e))
        # an azimuth step spans cos(elevation) times less arc off the horizon
        bw = np.ceil(sig_w / (safe * tan_a * np.cos(elev)))
    bh = np.nan_to_num(bh, nan=0.0, posinf=H).clip(0, H)
    bw = np.nan_to_num(bw, nan=0.0, posinf=W).clip(0, W // 2)
    r0 = np.floor(h)
    c0 = np.floor(w)
    rows = np.stack([r0 - bh, r0 + bh], 1)
    cols = np.stack([c0 - bw, c0 + bw], 1)
    if gate_divergence:
        # pixels outside the divergence cone can never receive weight
        div = spec.divergence
        rh = div / spec.d_elev
        rows[:, 0] = np.maximum(rows[:, 0], np.ceil(h - 0.5 - rh))
        rows[:, 1] = np.minimum(rows[:, 1], np.floor(h - 0.5 + rh))
        cosb = np.cos(np.minimum(np.abs(elev) + div, 1.5))
        cw = np.minimum(div / cosb, np.pi) / spec.d_azim
        cols[:, 0] = np.maximum(cols[:, 0], np.ceil(w - 0.5 - cw))
        cols[:, 1] = np.minimum(cols[:, 1], np.floor(w - 0.5 + cw))
    rows[:, 0] = np.maximum(rows[:, 0], 0)
    rows[:, 1] = np.minimum(rows[:, 1], H - 1)
    cols[:, 1] = np.minimum(cols[:, 1], cols[:, 0] + W - 1)
    in_range = (dn >= spec.range_min) & (dn <= spec.range_max)
    nonempty = (rows[:, 1] >= rows[:, 0]) & (cols[:, 1] >= cols[:, 0])
    visible = in_range & nonempty
    culled = {"range": int((~in_range).sum()), "empty_aabb": int((in_range & ~nonempty).sum())}
    proj = Projected(
        means, dist, dirs, n1, n2, cov2d, conic,
        np.stack([h, w], 1), rows.astype(np.int64), cols.astype(np.int64), visible, culled, mode,
    )
    if mode == "pseudo":
        _prepare_pseudo(proj, Rg, g.scales, azim)
    return proj


def _face_frames(face: torch.Tensor, dtype):
    ang = face.to(dtype) * (math.pi / 2)
    zero = torch.zeros_like(ang)
    f = torch.stack([torch.cos(ang), torch.sin(ang), zero], -1)
    u = torch.stack([-torch.sin(ang), torch.cos(ang), zero], -1)
    v = torch.stack([zero, zero, torch.ones_like(ang)], -1)
    return u, v, f


def _face_of(azim: np.ndarray) -> np.ndarray:
    return np.mod(np.round(azim / (np.pi / 2)).astype(np.int64), 4)


def _prepare_pseudo(proj: Projected, Rg, scales, azim):
    """Four 90-degree pinhole faces with the local affine (Jacobian) covariance."""
    face = _face_of(azim)
    u, v, f = _face_frames(torch.as_tensor(face), proj.means.dtype)
    m = proj.means
    xc, yc, zc = (m * u).sum(-1), (m * v).sum(-1), (m * f).sum(-1)
    zc = zc.clamp_min(1e-9)
    Wf = torch.stack([u, v, f], dim=1)  # rows are camera axes
    zero = torch.zeros_like(zc)
    J = torch.stack(
        [torch.stack([1 / zc, zero, -xc / zc**2], -1), torch.stack([zero, 1 / zc, -yc / zc**2], -1)], dim=1
    )
    T = J @ Wf @ Rg  # [N, 2, 3]
    cov = (T * (scales * scales)[:, None, :]) @ T.transpose(1, 2)
    cov = cov + (COV_FLOOR / (zc * zc))[:, None, None] * torch.eye(2, dtype=cov.dtype)
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    proj.conic_img = torch.stack([torch.stack([c, -b], -1), torch.stack([-b, a], -1)], -2) / det[:, None, None]
    proj.uv = torch.stack([xc / zc, yc / zc], -1)
    proj.face = face


def project_gaussian(g: Gaussians, viewpoint, spec: SensorSpec, **kw) -> Projected | None:
    """Single-Gaussian convenience wrapper; returns None when culled."""
    pose = RigidTransform(np.eye(3), np.asarray(viewpoint, dtype=np.float64))
    p = project_gaussians(g, pose, spec, **kw)
    return p if bool(p.visible[0]) else None


def back_project_offset(ray, dist: float, dprime, n1, n2):
    """In-plane offset of a ray's closest approach to a Gaussian mean.

    ``dx = dist * ((ray . d') ray - d')`` is expressed in the micro-plane
    basis. Returns None when the ray points away from the Gaussian.
    """
    ray = np.asarray(ray, dtype=np.float64)
    dprime = np.asarray(dprime, dtype=np.float64)
    c = float(ray @ dprime)
    if c <= 0.0:
        return None
    dx = dist * (c * ray - dprime)
    return np.array([dx @ np.asarray(n1), dx @ np.asarray(n2)])


# ---------------------------------------------------------------------------
# rasterization


@dataclass
class ContributionTape:
    """Per-pixel ordered contributor lists of one rasterization.

    Pair arrays are sorted by pixel, then by flight distance. Pairs behind
    the early-termination point are not recorded; ``active`` is kept for
    callers that filter tapes.
    """

    spec: SensorSpec
    render_id: int
    version: int
    n_gaussians: int
    pixel: torch.Tensor
    gaussian: torch.Tensor
    alpha: torch.Tensor
    transmittance: torch.Tensor
    weight: torch.Tensor
    depth: torch.Tensor
    active: torch.Tensor
    slot: torch.Tensor  # position within the pixel's list
    row: torch.Tensor  # compact index of the pixel among covered pixels

    def __len__(self) -> int:
        return int(self.pixel.shape[0])

    def contributors(self, h: int, w: int) -> list[tuple[int, float, float]]:
        pid = h * self.spec.width + w
        m = (self.pixel == pid) & self.active
        return list(zip(self.gaussian[m].tolist(), self.alpha[m].tolist(), self.transmittance[m].tolist()))

    def contributing_gaussians(self) -> torch.Tensor:
        m = self.active & (self.weight > 0)
        hit = torch.zeros(self.n_gaussians, dtype=torch.bool)
        hit[self.gaussian[m]] = True
        return torch.nonzero(hit).reshape(-1)


@dataclass
class Render:
    """Differentiable render outputs (pre ray-drop) plus bookkeeping."""

    spec: SensorSpec
    depth: torch.Tensor
    intensity: torch.Tensor
    raydrop: torch.Tensor
    alpha: torch.Tensor
    tape: ContributionTape
    gaussians: Gaussians
    projected: Projected
    offsets: torch.Tensor | None = None  # per-pair in-plane offsets (graph node)
    offset_scale: torch.Tensor | None = None  # meters-or-plane-units per pixel, per pair
    stats: dict = field(default_factory=dict)

    def channels(self) -> dict[str, torch.Tensor]:
        return {"depth": self.depth, "intensity": self.intensity, "raydrop": self.raydrop, "alpha": self.alpha}

    def to_rangeimage(self) -> RangeImage:
        a = self.alpha.detach().numpy().astype(np.float64)
        valid = a > 0
        img = RangeImage(
            self.spec,
            depth=np.where(valid, self.depth.detach().numpy().astype(np.float64), 0.0),
            intensity=np.where(valid, self.intensity.detach().numpy().astype(np.float64), 0.0),
            raydrop_prob=self.raydrop.detach().numpy().astype(np.float64),
            accum_alpha=a,
            valid=valid,
        )
        img.diagnostics = {"render_id": self.tape.render_id, **self.stats}
        return img


def _enumerate_pairs(proj: Projected, spec: SensorSpec):
    vis = np.nonzero(proj.visible)[0]
    if len(vis) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    r = proj.rows[vis]
    c = proj.cols[vis]
    nr = r[:, 1] - r[:, 0] + 1
    nc = c[:, 1] - c[:, 0] + 1
    counts = nr * nc
    gid = np.repeat(vis, counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    k = np.arange(counts.sum()) - start
    ncr = np.repeat(nc, counts)
    row = np.repeat(r[:, 0], counts) + k // ncr
    col = np.mod(np.repeat(c[:, 0], counts) + k % ncr, spec.width)
    return gid, row * spec.width + col


def _gaussian_table(proj: Projected, g: Gaussians) -> torch.Tensor:
    """Per-Gaussian row gathered once per pair: geometry, conic, opacity and channel values."""
    cols = [g.opacity[:, None], proj.dist[:, None], g.intensity[:, None], g.raydrop[:, None]]
    if proj.mode == "lbs":
        conic = proj.conic
        geo = [proj.dirs, proj.dist[:, None] * proj.n1, proj.dist[:, None] * proj.n2]
    else:
        conic = proj.conic_img
        geo = [proj.uv]
    abc = torch.stack([conic[:, 0, 0], conic[:, 0, 1], conic[:, 1, 1]], -1)
    return torch.cat(cols + [abc] + geo, -1)


def _pair_alpha(proj: Projected, g: Gaussians, spec: SensorSpec, gid: torch.Tensor, pix: torch.Tensor, table=None):
    """Per-pair kernel opacity, in-plane offsets, pixel-unit scale and gathered rows."""
    dtype = proj.dist.dtype
    ray = _rays_tensor(spec, dtype)[pix]
    t = (table if table is not None else _gaussian_table(proj, g))[gid]
    if proj.mode == "lbs":
        # d' is orthogonal to n1 and n2, so the offset reduces to (ray.d') * dist * (ray.n1, ray.n2)
        c = (ray * t[:, 7:10]).sum(-1)
        u = (ray * t[:, 10:13]).sum(-1)
        v = (ray * t[:, 13:16]).sum(-1)
        off = torch.stack([c * u, c * v], -1)
        px_scale = t[:, 1:2].detach() * torch.tensor([math.tan(spec.d_azim), math.tan(spec.d_elev)], dtype=dtype)
    else:
        u, v, f = _face_frames(torch.as_tensor(proj.face)[gid], dtype)
        rf = (ray * f).sum(-1)
        uv_ray = torch.stack([(ray * u).sum(-1) / rf, (ray * v).sum(-1) / rf], -1)
        off = uv_ray - t[:, 7:9]
        px_scale = torch.tensor([[spec.d_azim, spec.d_elev]], dtype=dtype).expand(len(gid), 2)
    power = -0.5 * (t[:, 4] * off[:, 0] ** 2 + 2 * t[:, 5] * off[:, 0] * off[:, 1] + t[:, 6] * off[:, 1] ** 2)
    alpha = t[:, 0] * torch.exp(power.clamp(max=0.0))
    return alpha, off, px_scale, t


def _segments(pix: torch.Tensor):
    """Row index, slot within the row, and row start for pixel-sorted pairs."""
    upix, counts = torch.unique_consecutive(pix, return_counts=True)
    starts = torch.cumsum(counts, 0) - counts
    prow = torch.repeat_interleave(torch.arange(len(upix)), counts)
    slot = torch.arange(len(pix)) - starts[prow]
    return upix, prow, slot, starts


def _transmittance(alpha: torch.Tensor, prow: torch.Tensor, slot: torch.Tensor, block: int = 1 << 21) -> torch.Tensor:
    """Exclusive per-pixel product of ``1 - alpha`` over pixel-sorted pairs.

    ``log(1 - alpha)`` is scattered into a padded ``[pixels, slots]`` layout
    and summed along each row in double precision, so every pixel's product
    only sees its own terms. Alpha is capped just below one inside the
    logarithm; a pair reaching the cap leaves transmittance under ``T_MIN``
    either way. Rows are processed in blocks of at most ``block`` cells.
    """
    if len(alpha) == 0:
        return alpha
    la = torch.log1p(-alpha.to(torch.float64).clamp(max=ALPHA_CAP))
    n_rows = int(prow[-1]) + 1
    width = int(slot.max()) + 1
    step = max(block // width, 1)
    if step >= n_rows:
        dense = torch.zeros((n_rows, width), dtype=torch.float64).index_put((prow, slot), la)
        excl = torch.cumsum(dense, 1) - dense
        return torch.exp(excl[prow, slot]).to(alpha.dtype)
    bounds = torch.searchsorted(prow, torch.arange(0, n_rows + step, step).clamp(max=n_rows))
    parts = []
    for lo, hi in zip(bounds[:-1].tolist(), bounds[1:].tolist()):
        if hi <= lo:
            continue
        r = prow[lo:hi] - prow[lo]
        s_ = slot[lo:hi]
        dense = torch.zeros((int(r[-1]) + 1, int(s_.max()) + 1), dtype=torch.float64).index_put((r, s_), la[lo:hi])
        excl = torch.cumsum(dense, 1) - dense
        parts.append(excl[r, s_])
    return torch.exp(torch.cat(parts)).to(alpha.dtype)


def live_pairs(alpha: torch.Tensor, pix: torch.Tensor, t_min: float = T_MIN) -> torch.Tensor:
    """Mask of pixel-sorted pairs in front of their pixel's termination point."""
    if len(alpha) == 0:
        return torch.zeros(0, dtype=torch.bool)
    _, prow, slot, _ = _segments(pix)
    return _transmittance(alpha, prow, slot) >= t_min


def composite(alpha: torch.Tensor, pix: torch.Tensor, values: torch.Tensor, n_pixels: int):
    """Front-to-back blending of pixel-sorted pairs.

    Returns per-pair weights and transmittance, the weighted channel sums
    ``[n_pixels, C]``, the accumulated alpha ``[n_pixels]`` and the segment
    layout ``(pixels, row, slot)``. The accumulated alpha is evaluated as
    ``1 - prod(1 - alpha)``, which equals the weight sum and stays inside
    [0, 1] under roundoff.
    """
    upix, prow, slot, _ = _segments(pix)
    T = _transmittance(alpha, prow, slot)
    w = alpha * T
    ch = torch.zeros((n_pixels, values.shape[1]), dtype=values.dtype).index_add(0, pix, w[:, None] * values)
    la = torch.log1p(-alpha.to(torch.float64).clamp(max=ALPHA_CAP))
    log_t = torch.zeros(n_pixels, dtype=torch.float64).index_add(0, pix, la)
    acc = (-torch.expm1(log_t)).to(values.dtype)
    return w, T, ch, acc, (upix, prow, slot)


def rasterize(
    proj: Projected,
    g: Gaussians,
    spec: SensorSpec,
    version: int = 0,
    reuse: ContributionTape | None = None,
    t_min: float = T_MIN,
    alpha_skip: float = ALPHA_SKIP,
) -> Render:
    """Front-to-back alpha compositing of depth, intensity and ray-drop.

    Pixel weights are ``w_i = a_i * prod_{j<i} (1 - a_j)`` over the
    distance-sorted contributors, with ``a_i = opacity_i * G_i(offset)``.
    Pairs with ``a_i < alpha_skip`` are skipped (they neither contribute
    nor attenuate). Compositing stops once transmittance drops below
    ``t_min``; pairs past that point are discarded before the
    differentiable pass, which does not change any output or gradient.
    Passing ``reuse`` replays an earlier
    tape's pair set, which makes the output a smooth function of the
    parameters.
    """
    dtype = proj.dist.dtype
    H, W = spec.shape
    n_total = 0
    if reuse is not None:
        gid, pix = reuse.gaussian, reuse.pixel
    else:
        gid_np, pix_np = _enumerate_pairs(proj, spec)
        gid = torch.as_tensor(gid_np)
        pix = torch.as_tensor(pix_np)
        if len(gid):
            with torch.no_grad():
                rays = _rays_tensor(spec, dtype)
                cos_e = (rays[pix] * proj.dirs[gid]).sum(-1)
                keep = cos_e >= math.cos(spec.divergence)
                if proj.mode == "pseudo":
                    az = torch.atan2(rays[pix, 1], rays[pix, 0]).numpy()
                    keep &= torch.as_tensor(_face_of(az) == proj.face[gid.numpy()])
                gid, pix = gid[keep], pix[keep]
                # order by (pixel, flight distance, Gaussian index) through one integer key
                d = proj.dist.detach().numpy()
                rank = np.empty(len(d), np.int64)
                rank[np.lexsort((np.arange(len(d)), d))] = np.arange(len(d))
                key = pix * len(d) + torch.as_tensor(rank)[gid]
                order = torch.argsort(key)
                gid, pix = gid[order], pix[order]
                n_total = len(gid)
                a0, _, _, _ = _pair_alpha(proj, g, spec, gid, pix)
                if alpha_skip > 0:
                    big = a0 >= alpha_skip
                    gid, pix, a0 = gid[big], pix[big], a0[big]
                live = live_pairs(a0, pix, t_min)
                gid, pix = gid[live], pix[live]

    alpha_p, off, px_scale, rows = _pair_alpha(proj, g, spec, gid, pix)
    if off.requires_grad:
        off.retain_grad()
    d_p = rows[:, 1]
    w_p, T_p, flat, acc, (upix, prow, slot) = composite(alpha_p, pix, rows[:, 1:4], H * W)
    depth, intensity, raydrop = flat.reshape(H, W, 3).unbind(-1)
    alpha = acc.reshape(H, W)

    tape = ContributionTape(
        spec,
        next(_render_ids),
        version,
        len(g),
        pix,
        gid,
        alpha_p.detach(),
        T_p.detach(),
        w_p.detach(),
        d_p.detach(),
        torch.ones(len(gid), dtype=torch.bool),
        slot,
        prow,
    )
    n_pix = len(upix)
    stats = {"pairs": int(len(gid)), "pairs_enumerated": int(max(n_total, len(gid))), "covered_pixels": n_pix, "visible": int(proj.visible.sum()), **proj.culled}
    return Render(spec, depth, intensity, raydrop, alpha, tape, g, proj, off, px_scale, stats)


def render(g: Gaussians, pose: RigidTransform | None, spec: SensorSpec, version: int = 0, mode: str = "lbs", aabb: str = "compact") -> Render:
    proj = project_gaussians(g, pose, spec, mode=mode, aabb=aabb)
    return rasterize(proj, g, spec, version=version)


# ---------------------------------------------------------------------------
# ray-drop decision


def local_density(img: RangeImage, tape: ContributionTape, window: float = 0.3, alpha_min: float = 0.01) -> np.ndarray:
    """Per-pixel count of contributors with ``alpha > alpha_min`` within ``window`` m of the surface depth."""
    H, W = img.spec.shape
    pix = tape.pixel.numpy()
    # window centered on the expected surface depth d_bar / alpha_bar
    surf = np.where(img.accum_alpha > 0, img.depth / np.maximum(img.accum_alpha, 1e-12), 0.0)
    dbar = surf.reshape(-1)[pix] if len(pix) else np.zeros(0)
    near = np.abs(tape.depth.numpy().astype(np.float64) - dbar) <= window
    ok = tape.active.numpy() & (tape.alpha.numpy() > alpha_min) & near
    return np.bincount(pix[ok], minlength=H * W).reshape(H, W)


def apply_raydrop(
    img: RangeImage, tape: ContributionTape, lambda_r: float = 0.5, lambda_tau: float = 2.0, window: float = 0.3, alpha_min: float = 0.01
) -> RangeImage:
    """Clear pixels whose beam is judged lost.

    A pixel is dropped when its blended ray-drop probability is at least
    ``lambda_r`` or fewer than ``lambda_tau`` contributors lie within
    ``window`` meters of its blended depth.
    """
    if img.spec != tape.spec or img.diagnostics.get("render_id") != tape.render_id:
        raise DomainError("tape does not belong to this render")
    tau = local_density(img, tape, window, alpha_min)
    drop = (img.raydrop_prob >= lambda_r) | (tau < lambda_tau)
    out = img.copy()
    out.valid = img.valid & ~drop
    out.depth = np.where(out.valid, img.depth, 0.0)
    out.intensity = np.where(out.valid, img.intensity, 0.0)
    out.diagnostics["dropped"] = int((img.valid & drop).sum())
    out.diagnostics["tau"] = tau
    return out


def false_color_png(img: RangeImage, path) -> None:
    """Stack a turbo-mapped depth panel above a gray intensity panel."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import colormaps
    from PIL import Image

    d = np.clip(img.depth / img.spec.range_max, 0, 1)
    rgb = (colormaps["turbo"](d)[..., :3] * 255).astype(np.uint8)
    rgb[~img.valid] = 0
    gray = (np.clip(img.intensity, 0, 1) * 255).astype(np.uint8)
    panel = np.concatenate([rgb, np.repeat(gray[..., None], 3, axis=2)], axis=0)
    Image.fromarray(panel).save(path)
