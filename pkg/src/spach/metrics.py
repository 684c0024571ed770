"""PSNR, 3D SSIM and ROI contrast-to-noise ratio."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data import RoiSpec, Volume

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _arrays(pred, ref):
    p = pred.data if isinstance(pred, Volume) else np.asarray(pred)
    r = ref.data if isinstance(ref, Volume) else np.asarray(ref)
    if p.shape != r.shape:
        raise ValueError(f"dimension mismatch: pred {p.shape} vs ref {r.shape}")
    return p.astype(np.float64), r.astype(np.float64)


def psnr(pred, ref) -> float:
    """10 log10(max(ref)^2 / MSE); +inf when the volumes are identical."""
    p, r = _arrays(pred, ref)
    if not np.any(r):
        raise ValueError("reference volume is constant zero; PSNR peak undefined")
    mse = np.mean((p - r) ** 2)
    if mse == 0:
        return float("inf")
    peak = r.max()
    return float(10.0 * np.log10(peak * peak / mse))


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    for ax in range(a.ndim):
        a = ndimage.correlate1d(a, g, axis=ax, mode="constant")
    return a[tuple(slice(half, n - half) for n in a.shape)]


def ssim(pred, ref) -> float:
    """Mean local SSIM over every fully-contained 11^3 Gaussian window.

    Dynamic range is max(ref) - min(ref), falling back to 1 for a constant ref.
    """
    p, r = _arrays(pred, ref)
    if min(p.shape) < SSIM_WINDOW:
        raise ValueError(f"volume {p.shape} smaller than the {SSIM_WINDOW}^3 SSIM window")
    L = float(r.max() - r.min()) or 1.0
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2
    g = gaussian_window_1d()
    mu_p, mu_r = _filter_valid(p, g), _filter_valid(r, g)
    var_p = _filter_valid(p * p, g) - mu_p * mu_p
    var_r = _filter_valid(r * r, g) - mu_r * mu_r
    cov = _filter_valid(p * r, g) - mu_p * mu_r
    num = (2 * mu_p * mu_r + c1) * (2 * cov + c2)
    den = (mu_p * mu_p + mu_r * mu_r + c1) * (var_p + var_r + c2)
    return float(np.mean(num / den))


def cnr(v, tumor: RoiSpec, ref: RoiSpec, voxel_size=None) -> float:
    """(mean tumour - mean reference) / population std of the reference ROI."""
    if isinstance(v, Volume):
        data, vs = v.data, v.voxel_size
    else:
        data, vs = np.asarray(v), voxel_size or (1.0, 1.0, 1.0)
    data = data.astype(np.float64)
    t_vals = data[tumor.mask(data.shape, vs)]
    r_vals = data[ref.mask(data.shape, vs)]
    if r_vals.size < 2:
        raise ValueError(f"reference ROI {ref.label!r} needs at least 2 voxels")
    sd = r_vals.std()
    if sd == 0:
        raise ValueError(f"reference ROI {ref.label!r} has zero standard deviation; CNR undefined")
    return float((t_vals.mean() - r_vals.mean()) / sd)
