"""
Image quality metrics: PSNR and single-scale SSIM.
"""

import logging

import numpy as np
from scipy import ndimage


logger = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# ITU-R BT.601 luma weights.
REC601 = np.array([0.299, 0.587, 0.114])


def _check_shapes(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"Image shapes differ: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """
    Peak signal-to-noise ratio for images in [0, 1].

    Returns:
        float: 10 log10(1 / MSE) in dB, capped at 99 dB for identical images.

    Raises:
        ValueError: If the shapes differ.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP_DB / 10.0):
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def to_gray(image: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an RGB image; 2-D inputs pass through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ REC601


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """
    Single-scale SSIM on the Rec. 601 luma of two images.

    Uses an 11x11 Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03 and a
    dynamic range of 1. The map is averaged over pixels whose window lies
    fully inside the image.

    Raises:
        ValueError: If the shapes differ or the image is smaller than the window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[1]}x{x.shape[0]}")

    # truncate chosen so the kernel radius is 5 -> 11 taps
    truncate = (SSIM_WINDOW // 2) / SSIM_SIGMA

    def blur(img):
        return ndimage.gaussian_filter(img, sigma=SSIM_SIGMA, truncate=truncate, mode="reflect")

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y

    numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    ssim_map = numerator / denominator

    pad = SSIM_WINDOW // 2
    return float(np.mean(ssim_map[pad:-pad, pad:-pad]))
