"""Image quality metrics used for evaluation: PSNR and SSIM.

Both operate on float arrays in [0, 1]. SSIM follows the standard
single-scale formulation with an 11x11 Gaussian window (sigma 1.5) and
the usual stabilizing constants, applied to the luminance of RGB inputs.
"""
from __future__ import annotations

import numpy as np

PSNR_CAP = 99.0


def psnr(pred: np.ndarray, target: np.ndarray,
         mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB, capped for identical images.

    With a boolean `mask` only the selected pixels contribute; the mask
    is broadcast over trailing channel axes.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("psnr inputs must share a shape")
    err = (pred - target) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("psnr mask selects no pixels")
        err = err[mask]
    mse = float(err.mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(-10.0 * np.log10(mse)))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _filter2(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode 2D correlation via a sliding-window view."""
    kh, kw = kernel.shape
    win = np.lib.stride_tricks.sliding_window_view(img, (kh, kw))
    return np.einsum("ijkl,kl->ij", win, kernel)


def _luminance(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean structural similarity over valid window positions."""
    pred = _luminance(np.asarray(pred, dtype=np.float64))
    target = _luminance(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ValueError("ssim inputs must share a shape")
    size = 11
    if pred.shape[0] < size or pred.shape[1] < size:
        raise ValueError("ssim inputs must be at least 11x11")
    kernel = _gaussian_kernel(size, 1.5)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_p = _filter2(pred, kernel)
    mu_t = _filter2(target, kernel)
    var_p = _filter2(pred * pred, kernel) - mu_p ** 2
    var_t = _filter2(target * target, kernel) - mu_t ** 2
    cov = _filter2(pred * target, kernel) - mu_p * mu_t
    num = (2.0 * mu_p * mu_t + c1) * (2.0 * cov + c2)
    den = (mu_p ** 2 + mu_t ** 2 + c1) * (var_p + var_t + c2)
    return float((num / den).mean())


def flow_epe(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-pixel endpoint error; NaN where the target flow is invalid."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("flow_epe inputs must share a shape")
    return np.linalg.norm(pred - target, axis=-1)


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Optical-flow color wheel: hue encodes direction, saturation magnitude.

    Returns float RGB in [0, 1]; invalid (non-finite) flow renders black.
    `max_mag` pins the saturation scale (defaults to the batch maximum).
    """
    flow = np.asarray(flow, dtype=np.float64)
    valid = np.isfinite(flow).all(axis=-1)
    fx = np.where(valid, flow[..., 0], 0.0)
    fy = np.where(valid, flow[..., 1], 0.0)
    mag = np.hypot(fx, fy)
    if max_mag is None:
        max_mag = float(mag.max())
    hue = (np.arctan2(-fy, -fx) / np.pi + 1.0) / 2.0  # angle -> [0, 1)
    sat = np.clip(mag / max(max_mag, 1e-9), 0.0, 1.0)
    val = valid.astype(np.float64)
    h6 = np.minimum(hue * 6.0, 6.0 - 1e-9)
    sector = h6.astype(int)
    frac = h6 - sector
    p = val * (1.0 - sat)
    q = val * (1.0 - sat * frac)
    t = val * (1.0 - sat * (1.0 - frac))
    lut = np.stack([
        np.stack([val, t, p], axis=-1), np.stack([q, val, p], axis=-1),
        np.stack([p, val, t], axis=-1), np.stack([p, q, val], axis=-1),
        np.stack([t, p, val], axis=-1), np.stack([val, p, q], axis=-1)])
    return np.take_along_axis(lut, sector[None, ..., None],
                              axis=0)[0]
