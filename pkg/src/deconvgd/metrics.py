"""PSNR and SSIM with boundary cropping.

Images live in [0, 1]; regions near the border (where deconvolution is
dominated by the boundary rule) are discarded before scoring.  The default
crop is half the blur-kernel side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .autodiff import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _as_image(t) -> np.ndarray:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim != 4:
        raise ValueError(f"expected rank-4 image tensor, got shape {arr.shape}")
    return np.asarray(arr, dtype=np.float64)


def _cropped(a: np.ndarray, b: np.ndarray, crop: int) -> tuple[np.ndarray, np.ndarray]:
    if a.shape != b.shape:
        raise ValueError(f"shapes {a.shape} and {b.shape} differ")
    if crop < 0:
        raise ValueError("crop must be nonnegative")
    h, w = a.shape[2], a.shape[3]
    if crop and 2 * crop >= min(h, w):
        raise ValueError(f"crop {crop} too large for {h}x{w} image")
    if crop:
        a = a[:, :, crop : h - crop, crop : w - crop]
        b = b[:, :, crop : h - crop, crop : w - crop]
    return a, b


def psnr(x_gt, x_hat, crop: int = 0) -> float:
    """10*log10(1 / mean squared error), channels pooled, peak 1.

    Identical inputs return +inf.
    """
    a, b = _cropped(_as_image(x_gt), _as_image(x_hat), crop)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gauss_window(n: int, sigma: float) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def ssim(x_gt, x_hat, crop: int = 0) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    Computed per channel over valid window positions, then averaged.
    """
    a, b = _cropped(_as_image(x_gt), _as_image(x_hat), crop)
    h, w = a.shape[2], a.shape[3]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"cropped extent {h}x{w} smaller than the {SSIM_WINDOW}px window")
    win = _gauss_window(SSIM_WINDOW, SSIM_SIGMA)
    half = SSIM_WINDOW // 2

    def local_mean(f):
        t = correlate1d(f, win, axis=-1, mode="constant")
        t = correlate1d(t, win, axis=-2, mode="constant")
        return t[..., half : f.shape[-2] - half, half : f.shape[-1] - half]

    mu1 = local_mean(a)
    mu2 = local_mean(b)
    s11 = local_mean(a * a) - mu1 * mu1
    s22 = local_mean(b * b) - mu2 * mu2
    s12 = local_mean(a * b) - mu1 * mu2
    num = (2.0 * mu1 * mu2 + SSIM_C1) * (2.0 * s12 + SSIM_C2)
    den = (mu1 * mu1 + mu2 * mu2 + SSIM_C1) * (s11 + s22 + SSIM_C2)
    return float((num / den).mean())


@dataclass
class EvalReport:
    names: list[str]
    psnr_values: list[float]
    ssim_values: list[float]
    crop_margin: int

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    def to_csv(self) -> str:
        lines = ["name,psnr_db,ssim"]
        for n, p, s in zip(self.names, self.psnr_values, self.ssim_values):
            lines.append(f"{n},{p:.6f},{s:.6f}")
        lines.append(f"mean,{self.mean_psnr:.6f},{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        w = max([len(n) for n in self.names] + [4])
        rows = [f"{'name':<{w}}  {'PSNR (dB)':>10}  {'SSIM':>7}"]
        for n, p, s in zip(self.names, self.psnr_values, self.ssim_values):
            rows.append(f"{n:<{w}}  {p:>10.2f}  {s:>7.4f}")
        rows.append(f"{'mean':<{w}}  {self.mean_psnr:>10.2f}  {self.mean_ssim:>7.4f}")
        return "\n".join(rows)


def evaluate_pairs(pairs, crop: int) -> EvalReport:
    """Score (name, truth, restored) triples with shared crop margin."""
    names, ps, ss = [], [], []
    for name, gt, restored in pairs:
        names.append(name)
        ps.append(psnr(gt, restored, crop))
        ss.append(ssim(gt, restored, crop))
    if not names:
        raise ValueError("nothing to evaluate")
    return EvalReport(names, ps, ss, crop)
