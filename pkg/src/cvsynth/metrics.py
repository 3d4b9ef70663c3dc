"""PSNR over whole volumes, per-view SSIM, and z-axis interpolation baselines."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .volume import Volume, upsampled_length

SSIM_WIN = 11
SSIM_SIGMA = 1.5


@dataclass
class EvalReport:
    psnr: float
    ssim_a: float
    ssim_c: float
    ssim_s: float
    voxels: int
    baselines: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["psnr"] = _json_float(self.psnr)
        for b in d["baselines"].values():
            b["psnr"] = _json_float(b["psnr"])
        return d


def _json_float(x):
    return "inf" if math.isinf(x) else x


def _check_pair(pred: Volume, gt: Volume):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")


def psnr(pred: Volume, gt: Volume) -> float:
    """10 log10(L^2 / MSE) with L the width of gt's intensity range; +inf on exact match."""
    _check_pair(pred, gt)
    lo, hi = gt.intensity_range
    err = np.mean((pred.data.astype(np.float64) - gt.data.astype(np.float64)) ** 2)
    if err == 0:
        return math.inf
    return 10.0 * math.log10((hi - lo) ** 2 / err)


def _gaussian_window():
    t = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-(t ** 2) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def ssim_image(x, y, data_range, warnings=None) -> float:
    """Gaussian-window SSIM averaged over window positions fully inside the image."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    if min(x.shape) < SSIM_WIN:
        if warnings is not None and "global_ssim_fallback" not in warnings:
            warnings.append("global_ssim_fallback")
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cxy = np.mean((x - mx) * (y - my))
        return float(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    g = _gaussian_window()

    def filt(a):
        a = correlate1d(a, g, axis=0, mode="reflect")
        return correlate1d(a, g, axis=1, mode="reflect")

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    pad = SSIM_WIN // 2
    return float(s[pad:-pad, pad:-pad].mean())


_VIEW_AXIS = {"axial": 2, "coronal": 0, "sagittal": 1}


def ssim_view(pred: Volume, gt: Volume, view: str, warnings=None) -> float:
    _check_pair(pred, gt)
    lo, hi = gt.intensity_range
    axis = _VIEW_AXIS[view]
    p = np.moveaxis(pred.data, axis, 0)
    g = np.moveaxis(gt.data, axis, 0)
    return float(np.mean([ssim_image(a, b, hi - lo, warnings) for a, b in zip(p, g)]))


def baseline_interpolate(v_lr: Volume, r: int, method: str = "linear") -> Volume:
    """Interpolate along z to r*l-r+1 slices; input slices are kept exactly.

    ``nearest`` picks the lower slice on midpoint ties.
    """
    l = v_lr.shape[2]
    if l < 2:
        raise ValueError("baseline interpolation needs at least two slices")
    L = upsampled_length(l, r)
    data = v_lr.data.astype(np.float64)
    out = np.empty(v_lr.shape[:2] + (L,))
    for j in range(L):
        i0, t = divmod(j, r)
        if t == 0:
            out[:, :, j] = data[:, :, i0]
        elif method == "linear":
            out[:, :, j] = data[:, :, i0] * (1 - t / r) + data[:, :, i0 + 1] * (t / r)
        elif method == "nearest":
            out[:, :, j] = data[:, :, i0 + 1] if 2 * t > r else data[:, :, i0]
        else:
            raise ValueError(f"unknown baseline method {method!r}")
    sy, sx, sz = v_lr.spacing
    return Volume(out, (sy, sx, sz / r), v_lr.intensity_range)


def evaluate(pred: Volume, gt: Volume, lr: Volume | None = None, r: int | None = None) -> EvalReport:
    warnings = []
    report = EvalReport(
        psnr=psnr(pred, gt),
        ssim_a=ssim_view(pred, gt, "axial", warnings),
        ssim_c=ssim_view(pred, gt, "coronal", warnings),
        ssim_s=ssim_view(pred, gt, "sagittal", warnings),
        voxels=int(np.prod(gt.shape)),
        warnings=warnings,
    )
    if lr is not None and r is not None:
        for method in ("nearest", "linear"):
            b = baseline_interpolate(lr, r, method)
            if b.shape == gt.shape:
                report.baselines[method] = {"psnr": psnr(b, gt), "ssim_a": ssim_view(b, gt, "axial")}
    return report


def dump_pngs(v: Volume, out_dir, prefix="slice"):
    """Write the middle image of each view as 8-bit grayscale PNG."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = v.intensity_range
    paths = []
    for view, axis in _VIEW_AXIS.items():
        mid = v.shape[axis] // 2
        img = np.take(v.data, mid, axis=axis)
        u8 = np.round(np.clip((img - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)
        path = out_dir / f"{prefix}_{view}_{mid + 1:03d}.png"
        Image.fromarray(u8).save(path)
        paths.append(path)
    return paths
