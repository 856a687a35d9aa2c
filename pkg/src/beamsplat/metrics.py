"""Point-cloud and range-image evaluation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .rangeview import DomainError, RangeImage, rangeimage_to_points

PSNR_CAP = 99.0


def _nn_dist(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Euclidean distance from each query point to its nearest reference point."""
    _, idx = cKDTree(ref).query(query)
    return np.sqrt(np.sum((query - ref[idx]) ** 2, axis=1))


def _check_sets(A, B):
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise DomainError("point sets must be nonempty")
    return A, B


def chamfer(A, B, squared: bool = False) -> float:
    """Symmetric chamfer distance: half the sum of both directed mean NN distances."""
    A, B = _check_sets(A, B)
    dab, dba = _nn_dist(A, B), _nn_dist(B, A)
    if squared:
        dab, dba = dab**2, dba**2
    return float(0.5 * dab.mean() + 0.5 * dba.mean())


def precision_recall(A, B, tau: float = 0.05) -> tuple[float, float]:
    A, B = _check_sets(A, B)
    return float(np.mean(_nn_dist(A, B) < tau)), float(np.mean(_nn_dist(B, A) < tau))


def fscore(A, B, tau: float = 0.05) -> float:
    p, r = precision_recall(A, B, tau)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(x, y, data_range: float = 1.0, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all window positions fully inside the image."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    win = gaussian_window(size, sigma)
    pad = size // 2
    if min(x.shape) < size:
        raise DomainError(f"images smaller than the {size}x{size} SSIM window")

    def filt(img):
        out = correlate1d(img, win, axis=0, mode="reflect")
        return correlate1d(out, win, axis=1, mode="reflect")

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s[pad:-pad, pad:-pad].mean())


def psnr(pred, gt, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(pred, float) - np.asarray(gt, float)) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(peak * peak / mse)


@dataclass
class EvalReport:
    cd: float
    fscore: float
    depth_rmse: float
    depth_mae: float
    depth_medae: float
    int_mae: float
    int_rmse: float
    psnr: float
    ssim: float
    fscore_tau: float = 0.05

    def to_json(self) -> dict:
        d = asdict(self)
        if not math.isfinite(d["psnr"]):
            d["psnr"] = PSNR_CAP
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)

    @staticmethod
    def mean(reports: list["EvalReport"]) -> "EvalReport":
        if not reports:
            raise DomainError("no reports to average")
        vals = {k: float(np.mean([min(getattr(r, k), PSNR_CAP) if k == "psnr" else getattr(r, k) for r in reports])) for k in asdict(reports[0])}
        return EvalReport(**vals)


TABLE_COLUMNS = ("CD", "F-score", "RMSE", "MAE", "MAE", "RMSE", "PSNR", "SSIM")


def format_table(rows: dict[str, EvalReport]) -> str:
    """Fixed-width table: point metrics, then intensity metrics."""
    head = f"{'':<12}|{'Point':^36}|{'Intensity':^36}"
    cols = "".join(f"{c:>9}" for c in TABLE_COLUMNS[:4]) + "|" + "".join(f"{c:>9}" for c in TABLE_COLUMNS[4:])
    lines = [head, f"{'':<12}|" + cols]
    for name, r in rows.items():
        ps = min(r.psnr, PSNR_CAP)
        vals = [r.cd, r.fscore, r.depth_rmse, r.depth_mae]
        ivals = [r.int_mae, r.int_rmse, ps, r.ssim]
        lines.append(f"{name:<12}|" + "".join(f"{v:9.4f}" for v in vals) + "|" + "".join(f"{v:9.4f}" for v in ivals))
    return "\n".join(lines)


def image_metrics(pred: RangeImage, gt: RangeImage, tau: float = 0.05) -> EvalReport:
    """Depth errors over gt-valid pixels, intensity errors over all pixels.

    Dropped predictions count as zero depth and intensity. CD and F-score
    compare the back-projected valid points of both images.
    """
    if pred.spec.shape != gt.spec.shape:
        raise DomainError("prediction and ground truth have different image sizes")
    m = gt.valid
    if not m.any():
        raise DomainError("ground truth has no valid pixels")
    pd_ = np.where(pred.valid, pred.depth, 0.0)
    err = np.abs(pd_[m] - gt.depth[m])
    pi = np.where(pred.valid, pred.intensity, 0.0)
    ie = pi - gt.intensity
    pa, _ = rangeimage_to_points(pred)
    ga, _ = rangeimage_to_points(gt)
    if len(pa):
        cd, fs = chamfer(pa, ga), fscore(pa, ga, tau)
    else:
        cd, fs = math.inf, 0.0
    return EvalReport(
        cd=cd,
        fscore=fs,
        depth_rmse=float(np.sqrt(np.mean(err**2))),
        depth_mae=float(err.mean()),
        depth_medae=float(np.median(err)),
        int_mae=float(np.abs(ie).mean()),
        int_rmse=float(np.sqrt(np.mean(ie**2))),
        psnr=psnr(pi, gt.intensity),
        ssim=ssim(pi, gt.intensity),
        fscore_tau=tau,
    )
