"""Pixel correlation and structural similarity."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ConfigError, DegenerateInputError
from .images import check_pair, to_gray

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
DATA_RANGE = 1.0


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("correlation undefined for a constant vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def pixcorr(generated, reference) -> float:
    """Pearson correlation of the flattened pixel values (all colour channels)."""
    g, r = check_pair(generated, reference)
    return pearson(g, r)


def ssim(generated, reference) -> float:
    """Mean local SSIM on the luma channel.

    Gaussian-weighted local statistics (sigma 1.5, 11 x 11 support, reflected
    borders), population covariance, and the mean taken over the interior
    where the window fits.
    """
    g, r = check_pair(generated, reference)
    x, y = to_gray(g), to_gray(r)
    if min(x.shape) < SSIM_WINDOW:
        raise ConfigError(f"image {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    radius = (SSIM_WINDOW - 1) // 2
    truncate = radius / SSIM_SIGMA

    def blur(a):
        return gaussian_filter(a, sigma=SSIM_SIGMA, truncate=truncate, mode="reflect")

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s[radius:-radius, radius:-radius].mean())
