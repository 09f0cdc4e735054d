"""PSNR, SSIM and per-pixel residual maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["QualityReport", "psnr", "ssim", "residual_map", "gaussian_window", "quality_report"]


def _pair(pred, truth):
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    t = np.asarray(getattr(truth, "data", truth), dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return p, t


def psnr(pred, truth, peak: float | None = None) -> float:
    """``10 log10(peak^2 / MSE)``; ``inf`` when the inputs are identical.

    ``peak`` defaults to the maximum of ``truth``.
    """
    p, t = _pair(pred, truth)
    peak = float(t.max()) if peak is None else float(peak)
    if peak <= 0:
        raise ValueError("peak must be > 0")
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim2d(a, b, peak, win):
    k = win.shape[0]
    if a.shape[0] < k or a.shape[1] < k:
        raise ValueError(f"image {a.shape} smaller than the {k}x{k} SSIM window")

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, win.shape), win)

    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(pred, truth, peak: float | None = None, per_band: bool = False):
    """Windowed SSIM (11x11 Gaussian, sigma 1.5, K1=0.01, K2=0.03), mean over valid windows.

    Cubes (H, W, C) are scored band by band and averaged; ``per_band=True``
    also returns the list of band scores.
    """
    p, t = _pair(pred, truth)
    peak = float(t.max()) if peak is None else float(peak)
    if peak <= 0:
        raise ValueError("peak must be > 0")
    win = gaussian_window()
    if p.ndim == 2:
        val = _ssim2d(p, t, peak, win)
        return (val, [val]) if per_band else val
    bands = [_ssim2d(p[..., k], t[..., k], peak, win) for k in range(p.shape[-1])]
    mean = float(np.mean(bands))
    return (mean, bands) if per_band else mean


def residual_map(pred, truth) -> np.ndarray:
    """Band-mean squared error at every pixel."""
    p, t = _pair(pred, truth)
    if p.ndim == 2:
        return (p - t) ** 2
    return np.mean((p - t) ** 2, axis=-1)


@dataclass
class QualityReport:
    psnr_bands: list[float]
    psnr_mean: float
    ssim_bands: list[float]
    ssim_mean: float
    residual: np.ndarray

    def rows(self):
        for k, (p, s) in enumerate(zip(self.psnr_bands, self.ssim_bands)):
            yield {"band": k, "psnr_db": p, "ssim": s}
        yield {"band": "mean", "psnr_db": self.psnr_mean, "ssim": self.ssim_mean}


def quality_report(pred, truth, peak: float | None = None) -> QualityReport:
    p, t = _pair(pred, truth)
    if p.ndim != 3:
        raise ValueError("quality_report expects H x W x C cubes")
    peak = float(t.max()) if peak is None else float(peak)
    pb = [psnr(p[..., k], t[..., k], peak) for k in range(p.shape[-1])]
    s_mean, sb = ssim(p, t, peak, per_band=True)
    return QualityReport(pb, float(np.mean(pb)), sb, s_mean, residual_map(p, t))
