"""Haar subbands, Parseval, and why phase carries structure.

Run:  python demos/02_wavelets_and_phase.py
"""
import torch

from clusir.degradations import procedural_image
from clusir.metrics import psnr
from clusir.wavelets import Spectrum, amp_phase, dwt2, high_band_energy_fraction, idwt2, recompose

a = torch.from_numpy(procedural_image(64, rng=1))
b = torch.from_numpy(procedural_image(64, rng=2))

s = dwt2(a)
energy = [float((band**2).sum()) for band in s]
print("subband energy  ll {:.1f}  hl {:.2f}  lh {:.2f}  hh {:.2f}".format(*energy))
print(f"total {sum(energy):.4f} vs image {float((a**2).sum()):.4f}")
print(f"reconstruction error {float((idwt2(s) - a).abs().max()):.2e}")

# most of a natural-looking image sits in the low band
print(f"high-band energy fraction: image {float(high_band_energy_fraction(a).mean()):.3f}, "
      f"ll band {float(high_band_energy_fraction(s.ll).mean()):.3f}")

# swap Fourier phases: the hybrid looks like the image whose phase it kept
sa, sb = amp_phase(a), amp_phase(b)
hybrid = recompose(Spectrum(sa.amplitude, sb.phase)).clamp(0, 1)
print(f"amplitude of A + phase of B:  PSNR to A {psnr(hybrid, a):.2f} dB, to B {psnr(hybrid, b):.2f} dB")
