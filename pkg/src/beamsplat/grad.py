"""Reverse-mode gradients for the render pipeline and finite-difference checks.

The forward pass records a torch graph from the field parameters through
spawning, projection and compositing. ``backward`` seeds it with per-pixel
loss gradients and gathers the result into a :class:`GradientBundle`,
including the absolute screen-space gradient statistic used for
densification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .field import Field
from .rangeview import DomainError
from .splat import Render

CHANNELS = ("depth", "intensity", "raydrop", "alpha")


@dataclass
class GradientBundle:
    params: dict[str, torch.Tensor]
    # Per-anchor sum over pixels of |dL/d(screen position)| and visibility flag.
    abs_screen_grad: torch.Tensor
    visible: torch.Tensor

    def finite(self) -> bool:
        return all(bool(torch.isfinite(g).all()) for g in self.params.values())

    def __getitem__(self, key: str) -> torch.Tensor:
        return self.params[key]

    @staticmethod
    def zeros_like(fld: Field) -> "GradientBundle":
        return GradientBundle(
            {k: torch.zeros_like(v) for k, v in fld.parameter_groups().items()},
            torch.zeros(len(fld), dtype=fld.dtype),
            torch.zeros(len(fld), dtype=torch.bool),
        )


def backward(render: Render, upstream: dict[str, torch.Tensor], fld: Field) -> GradientBundle:
    """Push per-pixel gradients (and an optional ``scales`` term) back to the field.

    ``upstream`` maps channel names (``depth``, ``intensity``, ``raydrop``,
    ``alpha``) to ``[H, W]`` gradients and may hold ``scales`` ``[N, 3]``
    for regularizers on the spawned scales.
    """
    if render.tape.version != fld.version:
        raise DomainError(f"stale tape: rendered at version {render.tape.version}, field is at {fld.version}")
    chans = render.channels()
    outs, grads = [], []
    for name in CHANNELS:
        if name in upstream and chans[name].requires_grad:
            outs.append(chans[name])
            grads.append(upstream[name].to(chans[name].dtype))
    if "scales" in upstream and render.gaussians.scales.requires_grad:
        outs.append(render.gaussians.scales)
        grads.append(upstream["scales"].to(render.gaussians.scales.dtype))
    fld.zero_grad()
    if render.offsets is not None and render.offsets.grad is not None:
        render.offsets.grad = None
    if outs:
        torch.autograd.backward(outs, grads)
    params = {}
    for key, t in fld.parameter_groups().items():
        params[key] = t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
    abs_grad = torch.zeros(len(fld), dtype=fld.dtype)
    visible = torch.zeros(len(fld), dtype=torch.bool)
    tape = render.tape
    g_anchor = render.gaussians.anchor_index
    if len(tape):
        visible[g_anchor[tape.gaussian]] = True
        og = render.offsets.grad if render.offsets is not None else None
        if og is not None:
            per_pair = torch.linalg.norm(og.detach() * render.offset_scale, dim=1)
            per_g = torch.zeros(tape.n_gaussians, dtype=fld.dtype).index_add_(0, tape.gaussian, per_pair.to(fld.dtype))
            abs_grad.index_add_(0, g_anchor, per_g)
    return GradientBundle(params, abs_grad, visible)


@dataclass
class FDReport:
    max_rel: float
    mean_rel: float
    worst: tuple
    per_group: dict = field(default_factory=dict)
    checked: int = 0

    def ok(self, tol: float) -> bool:
        return self.max_rel < tol

    def lines(self) -> list[str]:
        out = [f"{k:<28} max_rel={v['max_rel']:.3e} n={v['n']}" for k, v in self.per_group.items()]
        out.append(f"{'overall':<28} max_rel={self.max_rel:.3e} mean_rel={self.mean_rel:.3e} worst={self.worst}")
        return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.maximum(np.abs(analytic), np.abs(numeric)) + floor)


def finite_diff_check(loss_fn, params, analytic, eps: float = 1e-4, coords=None, floor: float = 1e-12) -> FDReport:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` against an analytic gradient.

    ``h = eps * max(1, |x_i|)``. ``coords`` limits the check to selected
    indices of the flattened parameter vector.
    """
    x = np.array(params, dtype=np.float64).reshape(-1)
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if eps <= 0:
        raise DomainError("eps must be positive")
    f0 = float(loss_fn(x))
    if not np.isfinite(f0):
        raise DomainError("loss is not finite at the base point")
    idx = np.arange(len(x)) if coords is None else np.asarray(coords)
    num = np.empty(len(idx))
    for k, i in enumerate(idx):
        h = eps * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = float(loss_fn(xp)), float(loss_fn(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"loss is not finite around coordinate {i}")
        num[k] = (fp - fm) / (2 * h)
    rel = rel_error(a[idx], num, floor)
    k = int(np.argmax(rel)) if len(rel) else 0
    return FDReport(
        float(rel.max()) if len(rel) else 0.0,
        float(rel.mean()) if len(rel) else 0.0,
        (int(idx[k]), float(a[idx][k]), float(num[k])) if len(rel) else (),
        checked=len(idx),
    )
