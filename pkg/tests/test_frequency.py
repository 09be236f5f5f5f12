import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from clusir.errors import ParameterError, ShapeError
from clusir.frequency import (DAFMM, FrequencySelfMining, HighFrequencyModulation, LowFrequencyModulation,
                              PooledNorm, dafmm_forward, fsb, high_freq_modulate, low_freq_modulate,
                              unfold_reflect)
from clusir.wavelets import WaveletSubbands, dwt2


def rand(*shape, seed=0):
    return torch.rand(*shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


def convex_weights(b, c, kk, seed=0):
    return torch.softmax(torch.randn(b, c, kk, dtype=torch.float64, generator=torch.Generator().manual_seed(seed)),
                         dim=-1)


# ---------------------------------------------------------------- fsb


def test_k1_is_identity():
    x = rand(2, 3, 6, 6)
    out = fsb(x, 1, torch.ones(2, 3, 1, dtype=torch.float64))
    assert torch.equal(out.low, x)
    assert torch.count_nonzero(out.high) == 0
    m = FrequencySelfMining(3, k=1).double()
    assert torch.allclose(m.filter_weights(x), torch.ones(2, 3, 1, dtype=torch.float64))


def test_constant_input():
    x = torch.full((1, 2, 5, 5), 0.37, dtype=torch.float64)
    out = fsb(x, 3, convex_weights(1, 2, 9))
    assert torch.allclose(out.low, x, atol=1e-12)
    assert out.high.abs().max() < 1e-12


def test_uniform_weights_are_reflect_box_filter():
    img = rand(7, 9, seed=4)
    out = fsb(img[None, None], 3, torch.full((1, 1, 9), 1 / 9, dtype=torch.float64))
    # scipy "mirror" is the edge-excluding reflection used by torch's reflect pad
    ref = ndimage.uniform_filter(img.numpy(), 3, mode="mirror")
    np.testing.assert_allclose(out.low[0, 0].numpy(), ref, atol=1e-12)


def test_weights_match_direct_correlation():
    img = rand(6, 6, seed=2)
    w = convex_weights(1, 1, 9, seed=3)
    out = fsb(img[None, None], 3, w)
    ref = ndimage.correlate(img.numpy(), w[0, 0].view(3, 3).numpy(), mode="mirror")
    np.testing.assert_allclose(out.low[0, 0].numpy(), ref, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.sampled_from([1, 3, 5]))
def test_residual_identity_and_convex_rows(seed, k):
    m = FrequencySelfMining(3, k).double()
    with torch.no_grad():
        m.conv.weight.normal_(generator=torch.Generator().manual_seed(seed))
    x = rand(2, 3, 8, 8, seed=seed)
    out = m(x)
    assert (out.low + out.high - x).abs().max() < 1e-6
    w = out.filter_weights
    assert (w >= 0).all() and (w.sum(-1) - 1).abs().max() < 1e-6


def test_zero_init_mining_is_box_filter():
    m = FrequencySelfMining(2, 3).double()
    assert torch.allclose(m.filter_weights(rand(3, 2, 4, 4)), torch.full((3, 2, 9), 1 / 9, dtype=torch.float64))


def test_fsb_errors():
    with pytest.raises(ParameterError):
        FrequencySelfMining(2, 2)
    with pytest.raises(ShapeError):
        fsb(rand(1, 2, 4, 4), 3, torch.ones(1, 3, 9))
    with pytest.raises(ShapeError):
        unfold_reflect(rand(1, 1, 2, 2), 5)


def test_pooled_norm_single_sample_training():
    n = PooledNorm(4)
    y = n(torch.tensor([[1.0, 2.0, 3.0, 4.0]]))
    assert torch.allclose(y.mean(), torch.zeros(())) and torch.isfinite(y).all()
    n.eval()
    assert torch.isfinite(n(torch.randn(1, 4))).all()


# ---------------------------------------------------------------- low band fusion


def test_identity_fusion_returns_first_operand():
    m = LowFrequencyModulation(3).double()
    a, b = rand(2, 3, 6, 6, seed=1), rand(2, 3, 6, 6, seed=2)
    assert (m(a, b) - a).abs().max() < 1e-5


def test_identical_operands_any_convex_fusion():
    m = LowFrequencyModulation(2).double()
    with torch.no_grad():
        for conv in (m.fuse_amp, m.fuse_phase):
            conv.bias.zero_()
            w = torch.rand(2, 2, dtype=torch.float64)
            w = w / w.sum(1, keepdim=True)
            eye = torch.eye(2, dtype=torch.float64)
            conv.weight.copy_(torch.cat([w[:, :1] * eye, w[:, 1:] * eye], 1)[..., None, None])
    a = rand(1, 2, 4, 4, seed=5)
    assert (m(a, a) - a).abs().max() < 1e-5


def test_amplitude_of_one_phase_of_other():
    a, b = rand(1, 1, 4, 4, seed=7), rand(1, 1, 4, 4, seed=8)
    amp = nn.Conv2d(2, 1, 1, bias=False).double()
    ph = nn.Conv2d(2, 1, 1, bias=False).double()
    with torch.no_grad():
        amp.weight.copy_(torch.tensor([0.0, 1.0]).view(1, 2, 1, 1))
        ph.weight.copy_(torch.tensor([1.0, 0.0]).view(1, 2, 1, 1))
    out = low_freq_modulate(a, b, amp, ph)
    # oracle straight from numpy's FFT
    fa, fb = np.fft.fft2(a[0, 0].numpy()), np.fft.fft2(b[0, 0].numpy())
    ref = np.fft.ifft2(np.abs(fb) * np.exp(1j * np.angle(fa))).real
    np.testing.assert_allclose(out[0, 0].detach().numpy(), ref, atol=1e-10)


def test_low_fusion_shape_check():
    m = LowFrequencyModulation(2)
    with pytest.raises(ShapeError):
        m(torch.rand(1, 2, 4, 4), torch.rand(1, 2, 4, 6))


# ---------------------------------------------------------------- high band gate


def _subbands(seed=0, c=2):
    return dwt2(rand(1, c, 8, 8, seed=seed))


def test_zero_projection_halves_subbands():
    m = HighFrequencyModulation(2).double()
    with torch.no_grad():
        m.proj.bias.zero_()
    s = _subbands()
    out = m(rand(1, 2, 4, 4), s)
    for o, band in zip(out, (s.hl, s.lh, s.hh)):
        assert torch.allclose(o, 0.5 * band, atol=1e-12)


def test_saturated_gate_barely_changes_subbands():
    s = _subbands(1)
    out = high_freq_modulate(rand(1, 2, 4, 4), s, lambda f: torch.full((1, 6), 1 / (1 + math.exp(-10)),
                                                                        dtype=torch.float64))
    for o, band in zip(out, (s.hl, s.lh, s.hh)):
        rel = (o - band).norm() / band.norm()
        assert rel < 1e-4


def test_zero_subbands_stay_zero():
    z = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
    m = HighFrequencyModulation(2).double()
    out = m(rand(1, 2, 4, 4), WaveletSubbands(z, z, z, z))
    assert all(torch.count_nonzero(o) == 0 for o in out)


def test_gate_is_channelwise():
    m = HighFrequencyModulation(3)
    assert m.gate(torch.rand(2, 3, 4, 4)).shape == (2, 9)


def test_high_gate_shape_check():
    m = HighFrequencyModulation(2)
    with pytest.raises(ShapeError):
        m(torch.rand(1, 2, 3, 3), dwt2(torch.rand(1, 2, 8, 8)))


# ---------------------------------------------------------------- full module


def test_identity_init_returns_input():
    m = DAFMM(4, prompt_dim=6)
    x, p = torch.rand(2, 4, 8, 8), torch.randn(2, 6)
    assert (m(x, p) - x).abs().max() < 1e-4
    assert m.last["ll"].shape == (2, 4, 4, 4)


def test_inner_path_reconstructs_when_gates_open():
    m = DAFMM(3).double()
    with torch.no_grad():
        m.high.proj.bias.fill_(40.0)
        m.proj_out.weight.copy_(torch.eye(3, dtype=torch.float64)[..., None, None])
    x = rand(1, 3, 8, 8, seed=3)
    # identity fusion keeps LL, open gates keep the detail bands: inner branch == x
    assert (m(x) - 2 * x).abs().max() < 1e-6


def test_prompt_changes_output_once_film_is_trained():
    m = DAFMM(2, prompt_dim=3)
    with torch.no_grad():
        m.film.weight.normal_()
        m.proj_out.weight.normal_()
    x = torch.rand(1, 2, 8, 8)
    a = dafmm_forward(x, torch.zeros(1, 3), m)
    b = dafmm_forward(x, torch.ones(1, 3), m)
    assert not torch.allclose(a, b)


def test_dafmm_odd_dims():
    with pytest.raises(ShapeError):
        DAFMM(2)(torch.rand(1, 2, 7, 8))
