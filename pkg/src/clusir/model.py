"""Four-stage encoder/decoder restoration network and checkpoint I/O."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError, StateError
from .frequency import DAFMM
from .routing import CrossAttention, PCGRMMoE
from .wavelets import WaveletSubbands, dwt2, idwt2

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    embed_dim: int = 16
    stage_depths: Sequence[int] = (1, 1, 1, 1)
    cluster_counts: Sequence[int] = (3, 3, 3, 3)
    k1_counts: Sequence[int] = (2, 2, 2, 2)
    experts_per_cluster: int = 2
    k2: int = 2
    heads: int = 1
    fsb_k: int = 3
    use_pcgrm: bool = True
    use_dafmm: bool = True
    init_mode: str = "orthogonal"
    hard_orthogonal: bool = False
    prompt_components: int = 5
    seed: int = 0

    def __post_init__(self):
        self.stage_depths = tuple(int(v) for v in self.stage_depths)
        self.cluster_counts = tuple(int(v) for v in self.cluster_counts)
        self.k1_counts = tuple(int(v) for v in self.k1_counts)
        self.validate()

    def validate(self):
        for name in ("stage_depths", "cluster_counts", "k1_counts"):
            if len(getattr(self, name)) != 4:
                raise ParameterError(f"{name} needs 4 entries")
        for n, k in zip(self.cluster_counts, self.k1_counts):
            if not n >= k >= 1:
                raise ParameterError(f"need cluster_count >= k1 >= 1, got {n}, {k}")
        if self.embed_dim % self.heads:
            raise ParameterError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 1 <= self.k2 <= self.experts_per_cluster:
            raise ParameterError(f"k2 must be in [1, {self.experts_per_cluster}]")
        if self.fsb_k < 1 or self.fsb_k % 2 == 0:
            raise ParameterError("fsb_k must be odd")
        if self.init_mode not in ("orthogonal", "random"):
            raise ParameterError(f"unknown init_mode {self.init_mode!r}")

    @property
    def widths(self):
        return tuple(self.embed_dim * 2**i for i in range(4))

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        for k in ("stage_depths", "cluster_counts", "k1_counts"):
            d[k] = list(d[k])
        return d


class LayerNorm2d(nn.Module):
    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


class GatedFFN(nn.Module):
    def __init__(self, channels, expansion=2, zero_out=True):
        super().__init__()
        hidden = channels * expansion
        self.proj_in = nn.Conv2d(channels, 2 * hidden, 1)
        self.dw = nn.Conv2d(2 * hidden, 2 * hidden, 3, padding=1, groups=2 * hidden)
        self.proj_out = nn.Conv2d(hidden, channels, 1)
        if zero_out:
            nn.init.zeros_(self.proj_out.weight)
            nn.init.zeros_(self.proj_out.bias)

    def forward(self, x):
        a, b = self.dw(self.proj_in(x)).chunk(2, dim=1)
        return self.proj_out(F.gelu(a) * b)


class WaveletTransformerBlock(nn.Module):
    """Self-attention over Haar LL tokens plus a gated feed-forward, both residual.

    Detail bands pass through untouched, so the attention branch only has to
    reconstruct its LL update.
    """

    def __init__(self, channels, heads=1):
        super().__init__()
        if channels % heads:
            raise ParameterError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.norm1 = LayerNorm2d(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.qkv_dw = nn.Conv2d(3 * channels, 3 * channels, 3, padding=1, groups=3 * channels)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = GatedFFN(channels)

    def attend(self, ll):
        b, c, h, w = ll.shape
        q, k, v = self.qkv_dw(self.qkv(ll)).chunk(3, dim=1)
        heads = self.heads

        def split(t):
            return t.reshape(b, heads, c // heads, h * w).transpose(-2, -1)

        q, k, v = split(q), split(k), split(v)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(c // heads), dim=-1)
        out = (attn @ v).transpose(-2, -1).reshape(b, c, h, w)
        return self.proj(out)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ShapeError(f"wavelet block needs even spatial dims, got {h}x{w}")
        s = dwt2(self.norm1(x))
        delta = self.attend(s.ll)
        zero = torch.zeros_like(delta)
        x = x + idwt2(WaveletSubbands(delta, zero, zero, zero))
        return x + self.ffn(self.norm2(x))


def wtb_block(feat, block: WaveletTransformerBlock):
    return block(feat)


class PromptHierarchy(nn.Module):
    """Cross-attend each shallow prompt onto the deepest one, then adapt widths."""

    def __init__(self, widths: Sequence[int], heads: int = 1, out_widths: Optional[Sequence[int]] = None):
        super().__init__()
        deep = widths[-1]
        out_widths = out_widths or widths[:-1]
        self.attn = nn.ModuleList(CrossAttention(w, deep, deep, heads) for w in widths[:-1])
        self.adapt = nn.ModuleList(nn.Linear(deep, o) for o in out_widths)

    def forward(self, prompts: Sequence[Optional[torch.Tensor]]):
        if len(prompts) != len(self.attn) + 1 or any(p is None for p in prompts):
            raise StateError("prompt hierarchy needs every stage prompt")
        deep = _as_tokens(prompts[-1])
        return [adapt(attn(_as_tokens(p), deep).squeeze(1))
                for p, attn, adapt in zip(prompts[:-1], self.attn, self.adapt)]


def _as_tokens(p):
    return p.unsqueeze(1) if p.dim() == 2 else p


class PromptGenBlock(nn.Module):
    """Adds a feature-conditioned convex mix of learned prompt components."""

    def __init__(self, prompt_dim: int, feat_dim: int, n_components: int = 5, generator=None):
        super().__init__()
        self.components = nn.Parameter(torch.randn(n_components, prompt_dim, generator=generator) * 0.1)
        self.logits = nn.Linear(feat_dim, n_components)
        self.out = nn.Linear(prompt_dim, prompt_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.last_weights = None

    def forward(self, prompt, feat):
        w = torch.softmax(self.logits(feat.mean(dim=(-2, -1))), dim=-1)
        self.last_weights = w
        return prompt + self.out(w @ self.components)


def pgb_refine(prompt, feat, block: PromptGenBlock):
    return block(prompt, feat)


class EncoderStage(nn.Module):
    def __init__(self, channels, depth, heads, moe: Optional[PCGRMMoE]):
        super().__init__()
        self.blocks = nn.ModuleList(WaveletTransformerBlock(channels, heads) for _ in range(depth))
        self.moe_norm = LayerNorm2d(channels) if moe is not None else None
        self.moe = moe
        self.last_moe_input = None

    def forward(self, x, generator=None, stochastic=False):
        for blk in self.blocks:
            x = blk(x)
        prompt = None
        if self.moe is not None:
            xn = self.moe_norm(x)
            self.last_moe_input = xn.detach()
            x = x + self.moe(xn, generator=generator, stochastic=stochastic)
            prompt = self.moe.last_decision.prompt.squeeze(1)
        return x, prompt


class DecoderLevel(nn.Module):
    def __init__(self, in_ch, out_ch, depth, heads, use_dafmm, fsb_k, use_prompt, n_components, generator):
        super().__init__()
        self.up = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.reduce = nn.Conv2d(2 * out_ch, out_ch, 1)
        self.blocks = nn.ModuleList(WaveletTransformerBlock(out_ch, heads) for _ in range(depth))
        self.pgb = PromptGenBlock(out_ch, out_ch, n_components, generator) if (use_dafmm and use_prompt) else None
        self.dafmm = DAFMM(out_ch, out_ch if use_prompt else None, fsb_k) if use_dafmm else None

    def forward(self, x, skip, prompt=None):
        x = self.up(F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self.reduce(torch.cat([x, skip], dim=1))
        for blk in self.blocks:
            x = blk(x)
        if self.dafmm is not None:
            if self.pgb is not None and prompt is not None:
                prompt = self.pgb(prompt, x)
            x = self.dafmm(x, prompt)
        return x


class ClusIR(nn.Module):
    """Restoration network; ``forward`` returns ``input + residual`` (unclipped)."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        cfg = config or ModelConfig()
        cfg.validate()
        self.config = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        torch.manual_seed(cfg.seed)
        w = cfg.widths
        self.stem = nn.Conv2d(3, w[0], 3, padding=1)
        self.encoders = nn.ModuleList()
        for i in range(4):
            moe = None
            if cfg.use_pcgrm:
                moe = PCGRMMoE(w[i], cfg.cluster_counts[i], cfg.k1_counts[i], cfg.experts_per_cluster,
                               cfg.k2, cfg.heads, init_mode=cfg.init_mode, generator=gen, stage=i + 1,
                               hard_orthogonal=cfg.hard_orthogonal)
            self.encoders.append(EncoderStage(w[i], cfg.stage_depths[i], cfg.heads, moe))
        self.down = nn.ModuleList(nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1) for i in range(3))
        self.hierarchy = PromptHierarchy(w, cfg.heads) if cfg.use_pcgrm else None
        # decoders[i] restores level i (width w[i]); run from deepest to shallowest
        self.decoders = nn.ModuleList(
            DecoderLevel(w[i + 1], w[i], cfg.stage_depths[i], cfg.heads, cfg.use_dafmm, cfg.fsb_k,
                         cfg.use_pcgrm, cfg.prompt_components, gen)
            for i in range(3)
        )
        self.head = nn.Conv2d(w[0], 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.record = False
        self.trace = {}

    def moe_blocks(self) -> List[PCGRMMoE]:
        return [e.moe for e in self.encoders if e.moe is not None]

    def prototype_banks(self):
        return [m.bank for m in self.moe_blocks()]

    def constrain_(self):
        for bank in self.prototype_banks():
            bank.constrain_()

    def forward(self, img, generator=None, stochastic=False):
        h, w = img.shape[-2:]
        if img.dim() != 4 or img.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(img.shape)}")
        if h % 16 or w % 16:
            raise ShapeError(f"H and W must be divisible by 16, got {h}x{w}")
        x = self.stem(img)
        skips, prompts, feats = [], [], []
        for i, enc in enumerate(self.encoders):
            x, p = enc(x, generator, stochastic)
            prompts.append(p)
            feats.append(x)
            if i < 3:
                skips.append(x)
                x = self.down[i](x)
        refined = self.hierarchy(prompts) if self.hierarchy is not None else [None] * 3
        for i in (2, 1, 0):
            x = self.decoders[i](x, skips[i], refined[i])
        if self.record:
            self.trace = {
                "features": [f.detach() for f in feats],
                "prompts": [p.detach() if p is not None else None for p in prompts],
                "decisions": [m.last_decision for m in self.moe_blocks()],
            }
        return img + self.head(x)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _to_tensor(img):
    t = torch.as_tensor(np.asarray(img) if not isinstance(img, torch.Tensor) else img)
    return t.to(torch.get_default_dtype())


@torch.no_grad()
def restore(img, model: ClusIR, rng=None, stochastic: bool = False):
    """Restore a ``(3, H, W)`` or ``(B, 3, H, W)`` image; returns the same kind
    of array, clipped to [0, 1]. ``stochastic`` samples prompt noise from ``rng``."""
    as_numpy = not isinstance(img, torch.Tensor)
    x = _to_tensor(img)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        gen = torch.Generator().manual_seed(rng) if isinstance(rng, int) else rng
        y = model(x, generator=gen, stochastic=stochastic).clamp(0, 1)
    finally:
        model.train(was_training)
    if single:
        y = y[0]
    return y.numpy().astype(np.float64) if as_numpy else y


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: ClusIR, optimizer=None, extra: Optional[dict] = None) -> Path:
    """Write config, parameters, optimizer and RNG state to a torch zip container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": np.random.get_state(),
    }
    payload.update(extra or {})
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, restore_rng: bool = False):
    """Return ``(model, payload)``. Optimizer state stays in ``payload["optimizer"]``."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ParameterError(f"unsupported checkpoint version {payload.get('version')!r}")
    model = ClusIR(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["model"])
    if restore_rng:
        torch.set_rng_state(payload["torch_rng"])
        np.random.set_state(payload["numpy_rng"])
    return model, payload
