"""Quality metrics: PSNR and SSIM in linear and tonemapped domains.

The tonemapped variants (PSNR-T / SSIM-T) run the exact training tonemapper
(mu-law, mu=5000 by default) on both images first; the -L variants compare the
raw radiance. Set-level evaluation averages per-scene rows.
"""

from __future__ import annotations

import csv
import dataclasses
import math

import numpy as np
from scipy import ndimage

from .radiance import RadianceImage, ShapeError, TonemapParams, mu_law

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair_arrays(a, b):
    a = a.pixels if isinstance(a, RadianceImage) else np.asarray(a)
    b = b.pixels if isinstance(b, RadianceImage) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def psnr(a, b):
    """Peak signal-to-noise ratio in dB, peak = 1; equal images cap at 99 dB."""
    a, b = _pair_arrays(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _window_mean(x, win):
    # separable valid-window filtering: filter full image, crop the margin
    half = len(win) // 2
    out = ndimage.correlate1d(x, win, axis=0, mode="constant")
    out = ndimage.correlate1d(out, win, axis=1, mode="constant")
    return out[half:x.shape[0] - half, half:x.shape[1] - half]


def _ssim_channel(x, y, c1, c2):
    win = _gaussian_window()
    mx = _window_mean(x, win)
    my = _window_mean(y, win)
    mxx = _window_mean(x * x, win)
    myy = _window_mean(y * y, win)
    mxy = _window_mean(x * y, win)
    vx = mxx - mx * mx
    vy = myy - my * my
    cov = mxy - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range=1.0):
    """Mean structural similarity, 11x11 Gaussian window (sigma 1.5).

    Accepts H x W or H x W x C arrays (or RadianceImage); multi-channel input
    is scored per channel and averaged. Windows are valid-only (no padding).
    """
    a, b = _pair_arrays(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ShapeError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window: {a.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    if a.ndim == 2:
        return _ssim_channel(a, b, c1, c2)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], c1, c2) for c in range(a.shape[2])]))


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    psnr_t: float
    ssim_t: float
    psnr_l: float
    ssim_l: float

    def as_row(self):
        return [self.psnr_t, self.ssim_t, self.psnr_l, self.ssim_l]


def evaluate(predicted, truth, params=TonemapParams()):
    """Score one prediction against ground truth in both domains."""
    p, t = _pair_arrays(predicted, truth)
    pt = mu_law(p, params.mu)
    tt = mu_law(t, params.mu)
    return MetricsReport(
        psnr_t=psnr(pt, tt),
        ssim_t=ssim(pt, tt),
        psnr_l=psnr(p, t),
        ssim_l=ssim(p, t),
    )


def summarize(reports):
    """Arithmetic mean of per-scene reports."""
    if not reports:
        raise ValueError("no reports to summarize")
    rows = np.array([r.as_row() for r in reports], dtype=np.float64)
    return MetricsReport(*rows.mean(axis=0))


def write_report_csv(path, named_reports, summary=None):
    """Write per-scene rows plus a trailing 'mean' summary row."""
    if summary is None and named_reports:
        summary = summarize([r for _, r in named_reports])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scene", "psnr_t", "ssim_t", "psnr_l", "ssim_l"])
        for name, rep in named_reports:
            w.writerow([name] + [f"{v:.6f}" for v in rep.as_row()])
        if summary is not None:
            w.writerow(["mean"] + [f"{v:.6f}" for v in summary.as_row()])
