"""PSNR and MS-SSIM on unit-interval RGB."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_K1, _K2 = 0.01, 0.03


def _check_pair(ref: np.ndarray, rec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    rec = np.asarray(rec, dtype=np.float64)
    if ref.shape != rec.shape:
        raise ValueError(f"dimension mismatch: {ref.shape} vs {rec.shape}")
    return ref, rec


def psnr(ref: np.ndarray, rec: np.ndarray, cap: float = PSNR_CAP) -> float:
    ref, rec = _check_pair(ref, rec)
    mse = float(np.mean((ref - rec) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the last two axes."""
    k = win.size
    out = correlate1d(img, win, axis=-2, mode="constant")
    out = correlate1d(out, win, axis=-1, mode="constant")
    lo = k // 2
    hi_h = img.shape[-2] - (k - 1 - lo)
    hi_w = img.shape[-1] - (k - 1 - lo)
    return out[..., lo:hi_h, lo:hi_w]


def ssim_components(a: np.ndarray, b: np.ndarray, win: np.ndarray) -> tuple[float, float]:
    """(mean SSIM, mean contrast-structure) over channels and valid positions of (C, H, W)."""
    c1, c2 = _K1**2, _K2**2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a**2
    sbb = _filter_valid(b * b, win) - mu_b**2
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    cs = (2 * sab + c2) / (saa + sbb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    img = img[..., :h, :w]
    return 0.25 * (img[..., 0::2, 0::2] + img[..., 1::2, 0::2] + img[..., 0::2, 1::2] + img[..., 1::2, 1::2])


def ms_ssim(ref: np.ndarray, rec: np.ndarray, weights=MS_SSIM_WEIGHTS) -> float:
    """Five-scale MS-SSIM of one (C, H, W) image pair.

    The 11-tap sigma-1.5 window shrinks to the image size at coarse scales;
    negative contrast-structure terms are clipped at zero before weighting.
    """
    a, b = _check_pair(ref, rec)
    if a.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {a.shape}")
    if min(a.shape[-2:]) < 2 ** (len(weights) - 1):
        raise ValueError(f"image {a.shape[-2:]} too small for {len(weights)} scales")
    value = 1.0
    for level, wt in enumerate(weights):
        size = min(11, a.shape[-2], a.shape[-1])
        ss, cs = ssim_components(a, b, gaussian_window(size))
        term = ss if level == len(weights) - 1 else cs
        value *= max(term, 0.0) ** wt
        a, b = _downsample(a), _downsample(b)
    return value


def video_psnr(ref: np.ndarray, rec: np.ndarray) -> list[float]:
    ref, rec = _check_pair(ref, rec)
    return [psnr(r, c) for r, c in zip(ref, rec)]


def video_ms_ssim(ref: np.ndarray, rec: np.ndarray) -> list[float]:
    ref, rec = _check_pair(ref, rec)
    return [ms_ssim(r, c) for r, c in zip(ref, rec)]
