"""Shared test helpers: procedural ground-truth images.

There is no photo corpus in the test environment, so truth images are
synthesized: smooth color gradients with random anti-aliased rectangles,
disks, and stripes.  Sharp edges matter; a deblurrer trained on edge-free
noise has nothing to learn.
"""

import numpy as np
from scipy.ndimage import gaussian_filter

from deconvgd.autodiff import Tensor
from deconvgd.degrade import quantize8


def toy_image(size: int, rng: np.random.Generator) -> np.ndarray:
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((3, h, w))
    for c in range(3):
        gx, gy = rng.uniform(-1, 1, 2)
        img[c] = 0.5 + 0.25 * (gx * (xx / w - 0.5) + gy * (yy / h - 0.5))
    for _ in range(rng.integers(6, 12)):
        color = rng.uniform(0.05, 0.95, 3)
        kind = rng.integers(0, 3)
        if kind == 0:  # rectangle
            i0, j0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
            i1 = rng.integers(i0 + 2, min(h, i0 + h // 2) + 1)
            j1 = rng.integers(j0 + 2, min(w, j0 + w // 2) + 1)
            mask = np.zeros((h, w))
            mask[i0:i1, j0:j1] = 1.0
        elif kind == 1:  # disk
            ci, cj = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(2, size / 4)
            mask = ((yy - ci) ** 2 + (xx - cj) ** 2 <= r * r).astype(np.float64)
        else:  # oriented stripes
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(0.15, 0.7)
            phase = rng.uniform(0, 2 * np.pi)
            mask = (np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase) > 0).astype(np.float64)
            keep = np.zeros((h, w))
            i0, j0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
            keep[i0 : i0 + h // 2, j0 : j0 + w // 2] = 1.0
            mask = mask * keep
        mask = gaussian_filter(mask, 0.4)  # slight anti-aliasing
        alpha = rng.uniform(0.5, 1.0)
        for c in range(3):
            img[c] = img[c] * (1 - alpha * mask) + color[c] * alpha * mask
    return np.clip(img, 0.0, 1.0)


def toy_images(n: int, size: int, seed: int) -> list[Tensor]:
    rng = np.random.default_rng(seed)
    return [Tensor(quantize8(toy_image(size, rng))[None]) for _ in range(n)]
