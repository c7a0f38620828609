"""PSNR and SSIM.

SSIM is computed on BT.601 luma with an 11x11 Gaussian window (sigma 1.5),
``C1 = (0.01 * peak)**2`` and ``C2 = (0.03 * peak)**2``, over the valid
region, and averaged.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

IDENTICAL = math.inf  # PSNR of a zero-error pair; excluded from means

LUMA = (0.299, 0.587, 0.114)


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a.detach().to(torch.float64).cpu()
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def psnr(pred, gt, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``IDENTICAL`` (inf) when MSE is zero."""
    p, g = _as_tensor(pred), _as_tensor(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    mse = float(((p - g) ** 2).mean())
    if mse == 0.0:
        return IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def is_identical(value: float) -> bool:
    return math.isinf(value) and value > 0


def to_luma(img: torch.Tensor) -> torch.Tensor:
    """[3,H,W] RGB -> [H,W]; 2-D input is returned as is."""
    if img.dim() == 2:
        return img
    if img.dim() == 3 and img.shape[0] == 3:
        w = torch.tensor(LUMA, dtype=img.dtype).view(3, 1, 1)
        return (img * w).sum(0)
    raise ValueError(f"expected [3,H,W] or [H,W], got {tuple(img.shape)}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(pred, gt, peak: float = 1.0, window: int = 11, sigma: float = 1.5) -> float:
    p, g = to_luma(_as_tensor(pred)), to_luma(_as_tensor(gt))
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    if min(p.shape) < window:
        raise ValueError(f"image {tuple(p.shape)} smaller than the {window}x{window} window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    k = gaussian_window(window, sigma)[None, None]
    x = torch.stack([p, g, p * p, g * g, p * g])[:, None]
    mu_x, mu_y, xx, yy, xy = F.conv2d(x, k)[:, 0]
    var_x = xx - mu_x ** 2
    var_y = yy - mu_y ** 2
    cov = xy - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())
