"""Orthonormal 2-D Haar transform and Fourier amplitude/phase helpers.

All functions act on the two trailing axes of a torch tensor, so they work for
``(B, C, H, W)`` feature maps as well as single ``(H, W)`` planes, and they are
differentiable.
"""
from typing import NamedTuple

import torch

from .errors import NumericalError, ParameterError, ShapeError

IMAG_TOLERANCE = 1e-4


class WaveletSubbands(NamedTuple):
    ll: torch.Tensor
    hl: torch.Tensor
    lh: torch.Tensor
    hh: torch.Tensor

    @property
    def high(self):
        return torch.cat([self.hl, self.lh, self.hh], dim=-3)


class Spectrum(NamedTuple):
    amplitude: torch.Tensor
    phase: torch.Tensor


def dwt2(x: torch.Tensor) -> WaveletSubbands:
    """Single-level orthonormal Haar transform.

    For each 2x2 block ``[[a, b], [c, d]]``::

        ll = (a + b + c + d) / 2      hl = (a - b + c - d) / 2
        lh = (a + b - c - d) / 2      hh = (a - b - c + d) / 2
    """
    if x.dim() < 2:
        raise ShapeError(f"dwt2 needs at least 2 dims, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"dwt2 needs even spatial dims, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return WaveletSubbands(
        ll=(a + b + c + d) / 2,
        hl=(a - b + c - d) / 2,
        lh=(a + b - c - d) / 2,
        hh=(a - b - c + d) / 2,
    )


def idwt2(s: WaveletSubbands) -> torch.Tensor:
    ll, hl, lh, hh = s
    if not (ll.shape == hl.shape == lh.shape == hh.shape):
        raise ShapeError(
            "subband shapes differ: "
            + ", ".join(str(tuple(t.shape)) for t in (ll, hl, lh, hh))
        )
    a = (ll + hl + lh + hh) / 2
    b = (ll - hl + lh - hh) / 2
    c = (ll + hl - lh - hh) / 2
    d = (ll - hl - lh + hh) / 2
    # interleave back to (..., 2h, 2w)
    top = torch.stack([a, b], dim=-1).flatten(-2)
    bottom = torch.stack([c, d], dim=-1).flatten(-2)
    return torch.stack([top, bottom], dim=-2).flatten(-3, -2)


def amp_phase(x: torch.Tensor) -> Spectrum:
    """Unnormalized 2-D DFT over the trailing axes, split into modulus and argument."""
    z = torch.fft.fft2(x)
    return Spectrum(amplitude=z.abs(), phase=torch.angle(z))


def recompose(s: Spectrum, check: bool = True) -> torch.Tensor:
    """Inverse DFT (1/N^2 scaling) of ``amplitude * exp(i * phase)``.

    With ``check`` the imaginary residue must stay below ``IMAG_TOLERANCE``;
    learned spectral fusions break conjugate symmetry slightly, so network code
    calls this with ``check=False`` and keeps the real part.
    """
    amplitude, phase = s
    if amplitude.shape != phase.shape:
        raise ShapeError(f"amplitude {tuple(amplitude.shape)} vs phase {tuple(phase.shape)}")
    if check and bool((amplitude < 0).any()):
        raise ParameterError("amplitude must be nonnegative")
    z = torch.polar(amplitude, phase)
    y = torch.fft.ifft2(z)
    if check:
        residue = y.imag.abs().max().item() if y.numel() else 0.0
        if residue >= IMAG_TOLERANCE:
            raise NumericalError(
                f"imaginary residue {residue:.3g} exceeds {IMAG_TOLERANCE}; "
                "amplitude/phase pair is not the spectrum of a real signal"
            )
    return y.real


def wrap_phase(phase: torch.Tensor) -> torch.Tensor:
    """Map angles into (-pi, pi]."""
    wrapped = torch.atan2(torch.sin(phase), torch.cos(phase))
    return torch.where(wrapped <= -torch.pi, wrapped + 2 * torch.pi, wrapped)


def high_band_energy_fraction(x: torch.Tensor, radius: float = 0.5) -> torch.Tensor:
    """Fraction of spectral energy beyond ``radius`` of the maximum frequency radius.

    Returns one value per leading index (e.g. per (B, C) plane). The DC term is
    excluded so that constant offsets do not dominate the ratio.
    """
    h, w = x.shape[-2:]
    fy = torch.fft.fftfreq(h, dtype=torch.float64).abs()
    fx = torch.fft.fftfreq(w, dtype=torch.float64).abs()
    r = torch.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    r = r / r.max()
    energy = torch.fft.fft2(x.to(torch.float64)).abs() ** 2
    energy[..., 0, 0] = 0
    total = energy.sum(dim=(-2, -1)).clamp_min(1e-30)
    return (energy * (r > radius)).sum(dim=(-2, -1)) / total
