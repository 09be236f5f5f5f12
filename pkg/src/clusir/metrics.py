"""PSNR, SSIM and multi-scale SSIM on [0, 1] images (torch, differentiable)."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParameterError, ShapeError

C1 = 0.01**2
C2 = 0.03**2
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _as_batch(t):
    t = torch.as_tensor(t) if not isinstance(t, torch.Tensor) else t
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4:
        raise ShapeError(f"expected (C, H, W) or (B, C, H, W), got {tuple(t.shape)}")
    return t


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)``; identical images give ``math.inf``."""
    a, b = _as_batch(a).double(), _as_batch(b).double()
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((a - b) ** 2).item()
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64):
    r = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x, win):
    # separable valid-mode Gaussian filter applied per channel
    c = x.shape[1]
    k = win.numel()
    x = F.conv2d(x, win.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    return F.conv2d(x, win.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)


def _ssim_terms(a, b, win_size=11, sigma=1.5):
    """Mean luminance and contrast-structure terms per (batch, channel)."""
    size = min(win_size, a.shape[-2], a.shape[-1])
    if size % 2 == 0:
        size -= 1
    win = gaussian_window(size, sigma, a.dtype).to(a.device)
    mu_a, mu_b = _filter(a, win), _filter(b, win)
    aa, bb, ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = _filter(a * a, win) - aa
    var_b = _filter(b * b, win) - bb
    cov = _filter(a * b, win) - ab
    lum = (2 * ab + C1) / (aa + bb + C1)
    cs = (2 * cov + C2) / (var_a + var_b + C2)
    return lum.mean(dim=(-2, -1)), (lum * cs).mean(dim=(-2, -1)), cs.mean(dim=(-2, -1))


def ssim(a, b) -> torch.Tensor:
    """Single-scale SSIM (11x11 Gaussian, sigma 1.5) averaged over batch and channels."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    _, s, _ = _ssim_terms(a, b)
    return s.mean()


def ms_ssim(a, b, scales: int = 3) -> torch.Tensor:
    """Multi-scale SSIM with the standard per-scale exponents renormalized to
    ``scales`` levels; 2x average pooling between levels.

    At coarse levels smaller than the 11-pixel window the window is shrunk
    to the largest odd size that fits.
    """
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ParameterError(f"scales must be in [1, {len(MS_SSIM_WEIGHTS)}]")
    min_side = 2 ** (scales - 1) * 8
    if min(a.shape[-2:]) < min_side:
        raise ParameterError(f"ms_ssim with {scales} scales needs images >= {min_side} px")
    w = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=a.dtype, device=a.device)
    w = w / w.sum()
    value = torch.ones(a.shape[:2], dtype=a.dtype, device=a.device)
    for j in range(scales):
        _, full, cs = _ssim_terms(a, b)
        term = (full if j == scales - 1 else cs).clamp_min(0)
        value = value * term ** w[j]
        if j < scales - 1:
            a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
    return value.mean()


def to_numpy_image(t) -> np.ndarray:
    return t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
