import numpy as np
import pytest
import torch

from clusir.degradations import degrade, procedural_image
from clusir.errors import ParameterError, ShapeError, StateError
from clusir.metrics import psnr
from clusir.model import (ClusIR, ModelConfig, PromptGenBlock, PromptHierarchy, WaveletTransformerBlock,
                          count_parameters, load_checkpoint, pgb_refine, restore, save_checkpoint, wtb_block)
from clusir.wavelets import dwt2


@pytest.fixture(scope="module")
def model():
    return ClusIR(ModelConfig())


@pytest.fixture(scope="module")
def noisy():
    return degrade(procedural_image(64, rng=3), "noise", 0).degraded


def test_output_shape(model):
    x = torch.rand(2, 3, 32, 48)
    assert model(x).shape == x.shape


def test_identity_init_psnr(model, noisy):
    out = restore(noisy, model)
    assert out.shape == noisy.shape
    assert out.min() >= 0 and out.max() <= 1
    assert psnr(out, noisy) > 40


def test_global_residual_small_at_init(model):
    x = torch.rand(2, 3, 32, 32)
    assert (model(x) - x).abs().max() < 0.05


def test_restore_deterministic(model, noisy):
    torch.manual_seed(0)
    a = restore(noisy, model)
    torch.manual_seed(123)
    b = restore(noisy, model)
    assert np.array_equal(a, b)


def test_restore_stochastic_seeded(noisy):
    m = ClusIR(ModelConfig(seed=1))
    with torch.no_grad():
        m.head.weight.normal_(std=0.1)
        for mb in m.moe_blocks():
            mb.bank.log_sigma.fill_(0.0)
    a = restore(noisy, m, rng=5, stochastic=True)
    b = restore(noisy, m, rng=5, stochastic=True)
    c = restore(noisy, m, rng=6, stochastic=True)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_same_seed_same_weights():
    a, b = ClusIR(ModelConfig(seed=4)), ClusIR(ModelConfig(seed=4))
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_parameter_budget(model):
    assert count_parameters(model) < 2_000_000


@pytest.mark.parametrize("shape", [(1, 3, 40, 32), (1, 1, 32, 32), (3, 32, 32)])
def test_bad_input_shapes(model, shape):
    with pytest.raises(ShapeError):
        model(torch.rand(*shape))


def test_ablated_variants_run():
    x = torch.rand(1, 3, 32, 32)
    for cfg in (ModelConfig(use_pcgrm=False, use_dafmm=False), ModelConfig(use_dafmm=False),
                ModelConfig(use_pcgrm=False)):
        m = ClusIR(cfg)
        assert m(x).shape == x.shape
    assert ClusIR(ModelConfig(use_pcgrm=False)).moe_blocks() == []


def test_fewer_parameters_without_modules():
    full = count_parameters(ClusIR(ModelConfig()))
    assert count_parameters(ClusIR(ModelConfig(use_pcgrm=False, use_dafmm=False))) < full


@pytest.mark.parametrize("kw", [dict(cluster_counts=(2, 2, 2)), dict(k1_counts=(4, 2, 2, 2)),
                                dict(k2=3), dict(fsb_k=2), dict(init_mode="kmeans"), dict(heads=3)])
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        ModelConfig(**kw)


def test_config_dict_roundtrip():
    cfg = ModelConfig(cluster_counts=(2, 3, 4, 6), embed_dim=8)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ParameterError):
        ModelConfig.from_dict({"depth": 3})


def test_record_trace(model):
    model.record = True
    try:
        model(torch.rand(2, 3, 32, 32))
    finally:
        model.record = False
    t = model.trace
    assert [f.shape[1] for f in t["features"]] == [16, 32, 64, 128]
    assert len(t["decisions"]) == 4
    for d in t["decisions"]:
        assert torch.allclose(d.full_posterior.sum(-1), torch.ones(2), atol=1e-6)


def test_prototypes_stay_unit_after_constrain(model):
    with torch.no_grad():
        for b in model.prototype_banks():
            b.prototypes.mul_(2)
    model.constrain_()
    for b in model.prototype_banks():
        assert torch.allclose(b.prototypes.norm(dim=1), torch.ones(b.n), atol=1e-6)


# ---------------------------------------------------------------- blocks


def test_wtb_zero_init_is_identity():
    blk = WaveletTransformerBlock(8, heads=2)
    x = torch.rand(2, 8, 8, 8)
    assert torch.equal(wtb_block(x, blk), x)
    with pytest.raises(ShapeError):
        blk(torch.rand(1, 8, 7, 8))
    with pytest.raises(ParameterError):
        WaveletTransformerBlock(8, heads=3)


def test_wtb_attention_only_touches_ll_band():
    blk = WaveletTransformerBlock(4).double()
    with torch.no_grad():
        blk.proj.weight.normal_()
    x = torch.rand(1, 4, 8, 8, dtype=torch.float64)
    s_in = dwt2(blk.norm1(x))
    s_out = dwt2(wtb_block(x, blk) - x)
    # the attention branch writes zeros into the detail bands (ffn is still zero-init)
    assert s_out.hl.abs().max() < 1e-12 and s_out.hh.abs().max() < 1e-12
    assert s_out.ll.abs().max() > 0 and s_in.ll.shape == s_out.ll.shape


def test_prompt_hierarchy_single_key():
    widths = (4, 8, 16, 32)
    h = PromptHierarchy(widths)
    prompts = [torch.randn(2, w) for w in widths]
    out = h(prompts)
    assert [o.shape[-1] for o in out] == [4, 8, 16]
    for attn, adapt, o in zip(h.attn, h.adapt, out):
        assert torch.allclose(attn.last_weights, torch.ones_like(attn.last_weights))
        assert torch.allclose(o, adapt(attn.out(attn.v(prompts[-1]))), atol=1e-6)
    with pytest.raises(StateError):
        h(prompts[:3] + [None])


def test_pgb_zero_init_unchanged():
    blk = PromptGenBlock(6, 4, 5)
    p = torch.randn(2, 6)
    assert torch.equal(pgb_refine(p, torch.rand(2, 4, 4, 4), blk), p)
    assert torch.allclose(blk.last_weights.sum(-1), torch.ones(2))


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path, noisy):
    m = ClusIR(ModelConfig(embed_dim=8, seed=2))
    with torch.no_grad():
        m.head.weight.normal_(std=0.05)
    path = save_checkpoint(tmp_path / "m.pt", m, extra={"step": 7})
    m2, payload = load_checkpoint(path)
    assert payload["step"] == 7
    assert m2.config == m.config
    assert np.array_equal(restore(noisy, m), restore(noisy, m2))


def test_checkpoint_version_guard(tmp_path):
    m = ClusIR(ModelConfig(embed_dim=8))
    path = save_checkpoint(tmp_path / "m.pt", m, extra={"version": 99})
    with pytest.raises(ParameterError):
        load_checkpoint(path)
