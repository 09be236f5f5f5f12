"""Degradation-aware frequency modulation.

A feature map is split by one Haar level. The LL band goes through a learned
content-adaptive low-pass filter (frequency self-mining) whose residual is the
mined high-frequency part; LL is then refined by amplitude/phase fusion in the
Fourier domain and the detail bands are gated channel-wise by the mined
high-frequency part before the inverse Haar transform.
"""
from __future__ import annotations

from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError
from .wavelets import Spectrum, WaveletSubbands, amp_phase, dwt2, idwt2, recompose, wrap_phase


class MinedFrequencies(NamedTuple):
    low: torch.Tensor
    high: torch.Tensor
    filter_weights: torch.Tensor  # (B, C, k*k)


class PooledNorm(nn.Module):
    """Batch norm for pooled (B, F) vectors that degrades to a per-sample
    layer norm when a training batch holds a single sample."""

    def __init__(self, features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = nn.Parameter(torch.ones(features))
        self.bias = nn.Parameter(torch.zeros(features))
        self.register_buffer("running_mean", torch.zeros(features))
        self.register_buffer("running_var", torch.ones(features))

    def forward(self, x):
        if self.training and x.shape[0] == 1:
            y = F.layer_norm(x, x.shape[-1:], eps=self.eps)
            return y * self.weight + self.bias
        return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                            self.training, self.momentum, self.eps)


def unfold_reflect(x: torch.Tensor, k: int) -> torch.Tensor:
    """``(B, C, H, W) -> (B, C, k*k, H*W)`` patches with reflect padding, stride 1."""
    b, c, h, w = x.shape
    r = k // 2
    if r:
        if r >= h or r >= w:
            raise ShapeError(f"reflect padding {r} too large for {h}x{w}")
        x = F.pad(x, (r, r, r, r), mode="reflect")
    return F.unfold(x, k).view(b, c, k * k, h * w)


class FrequencySelfMining(nn.Module):
    def __init__(self, channels: int, k: int = 3):
        super().__init__()
        if k < 1 or k % 2 == 0:
            raise ParameterError(f"fsb kernel size must be odd and >= 1, got {k}")
        self.k = k
        self.conv = nn.Conv2d(channels, channels * k * k, 1)
        self.norm = PooledNorm(channels * k * k)
        # start as a box filter
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def filter_weights(self, f_ll):
        b, c = f_ll.shape[:2]
        pooled = F.adaptive_avg_pool2d(f_ll, 1)
        z = self.norm(self.conv(pooled).flatten(1))
        return torch.softmax(z.view(b, c, self.k * self.k), dim=-1)

    def forward(self, f_ll, weights: Optional[torch.Tensor] = None) -> MinedFrequencies:
        return fsb(f_ll, self.k, self.filter_weights(f_ll) if weights is None else weights)


def fsb(f_ll: torch.Tensor, k: int, weights: torch.Tensor) -> MinedFrequencies:
    """Filter ``f_ll`` with per-(sample, channel) convex ``k x k`` weights.

    ``weights`` has shape ``(B, C, k*k)`` or ``(C, k*k)``; the high part is the
    exact residual ``f_ll - low``.
    """
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"fsb kernel size must be odd and >= 1, got {k}")
    b, c, h, w = f_ll.shape
    if weights.dim() == 2:
        weights = weights.unsqueeze(0).expand(b, -1, -1)
    if weights.shape != (b, c, k * k):
        raise ShapeError(f"filter weights {tuple(weights.shape)} do not match {(b, c, k * k)}")
    patches = unfold_reflect(f_ll, k)
    low = (weights.unsqueeze(-1) * patches).sum(dim=2).view(b, c, h, w)
    return MinedFrequencies(low, f_ll - low, weights)


class LowFrequencyModulation(nn.Module):
    """Fuse Fourier amplitudes and phases of two maps with 1x1 channel maps."""

    def __init__(self, channels: int):
        super().__init__()
        self.fuse_amp = nn.Conv2d(2 * channels, channels, 1)
        self.fuse_phase = nn.Conv2d(2 * channels, channels, 1)
        self.reset_identity()

    @torch.no_grad()
    def reset_identity(self, select: int = 0):
        """Make both fusions copy input ``select`` (0: first operand, 1: second)."""
        c = self.fuse_amp.out_channels
        for conv in (self.fuse_amp, self.fuse_phase):
            conv.weight.zero_()
            conv.bias.zero_()
            conv.weight[:, select * c:(select + 1) * c, 0, 0] = torch.eye(c)

    def forward(self, f_ll, f_l):
        return low_freq_modulate(f_ll, f_l, self.fuse_amp, self.fuse_phase)


def low_freq_modulate(f_ll, f_l, fuse_amp: nn.Module, fuse_phase: nn.Module, check: bool = False):
    if f_ll.shape != f_l.shape:
        raise ShapeError(f"shape mismatch {tuple(f_ll.shape)} vs {tuple(f_l.shape)}")
    a1, p1 = amp_phase(f_ll)
    a2, p2 = amp_phase(f_l)
    amp = fuse_amp(torch.cat([a1, a2], dim=1)).clamp_min(0)
    phase = wrap_phase(fuse_phase(torch.cat([p1, p2], dim=1)))
    return recompose(Spectrum(amp, phase), check=check)


class HighFrequencyModulation(nn.Module):
    """Channel-wise sigmoid gate from the mined high part over concatenated detail bands."""

    def __init__(self, channels: int, init_bias: float = 4.0):
        super().__init__()
        self.proj = nn.Linear(channels, 3 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.constant_(self.proj.bias, init_bias)

    def gate(self, f_h):
        return torch.sigmoid(self.proj(f_h.mean(dim=(-2, -1))))

    def forward(self, f_h, subbands: WaveletSubbands):
        return high_freq_modulate(f_h, subbands, self.gate)


def high_freq_modulate(f_h, subbands: WaveletSubbands, gate_fn):
    hl, lh, hh = subbands.hl, subbands.lh, subbands.hh
    if f_h.shape[-2:] != hl.shape[-2:] or not (hl.shape == lh.shape == hh.shape):
        raise ShapeError(f"f_h {tuple(f_h.shape)} incompatible with subbands {tuple(hl.shape)}")
    g = gate_fn(f_h)                                   # (B, 3C)
    gated = g[..., None, None] * torch.cat([hl, lh, hh], dim=1)
    return tuple(gated.chunk(3, dim=1))


class DAFMM(nn.Module):
    """Prompt-conditioned wavelet/Fourier refinement with a residual output."""

    def __init__(self, channels: int, prompt_dim: Optional[int] = None, k: int = 3):
        super().__init__()
        self.film = nn.Linear(prompt_dim, 2 * channels) if prompt_dim else None
        if self.film is not None:
            nn.init.zeros_(self.film.weight)
            nn.init.zeros_(self.film.bias)
        self.fsb = FrequencySelfMining(channels, k)
        self.low = LowFrequencyModulation(channels)
        self.high = HighFrequencyModulation(channels)
        self.proj_out = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)
        self.last = None

    def forward(self, feat, prompt: Optional[torch.Tensor] = None):
        h, w = feat.shape[-2:]
        if h % 2 or w % 2:
            raise ShapeError(f"DAFMM needs even spatial dims, got {h}x{w}")
        x = feat
        if prompt is not None and self.film is not None:
            if prompt.dim() == 3:
                prompt = prompt.squeeze(1)
            scale, shift = self.film(prompt).chunk(2, dim=-1)
            x = x * (1 + scale[..., None, None]) + shift[..., None, None]
        s = dwt2(x)
        mined = self.fsb(s.ll)
        low = self.low(s.ll, mined.low)
        hl, lh, hh = self.high(mined.high, s)
        self.last = {"ll": s.ll.detach(), "low": mined.low.detach(), "high": mined.high.detach()}
        return feat + self.proj_out(idwt2(WaveletSubbands(low, hl, lh, hh)))


def dafmm_forward(feat, prompt, module: DAFMM):
    return module(feat, prompt)
