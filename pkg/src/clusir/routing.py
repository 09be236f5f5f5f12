"""Cluster-guided two-stage expert routing and the flat MoE baseline.

Stage one scores pooled features against a bank of unit-norm prototypes and
keeps the ``k1`` most likely clusters; stage two draws a prompt from the
selected clusters' Gaussian priors, attends to it from the features and picks
the ``k2`` best experts inside every selected cluster.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError


class PrototypeBank(nn.Module):
    """Unit-norm cluster prototypes plus per-cluster Gaussian priors (mu, log sigma)."""

    def __init__(self, n: int, d: int, mode: str = "orthogonal", generator=None,
                 stage: int = 1, sigma: float = 0.1, hard_orthogonal: bool = False):
        super().__init__()
        if n < 1 or d < 1:
            raise ParameterError(f"prototype bank needs n, d >= 1, got {n}, {d}")
        if mode == "orthogonal":
            if n > d:
                raise ParameterError(f"orthogonal init needs n <= d, got n={n}, d={d}")
            g = torch.randn(d, n, generator=generator, dtype=torch.float64)
            q, r = torch.linalg.qr(g)
            # fix column signs so the factorization is unique
            s = torch.sign(torch.diagonal(r))
            q = q * torch.where(s == 0, torch.ones_like(s), s)
            p = q.T.contiguous()
        elif mode == "random":
            p = torch.randn(n, d, generator=generator, dtype=torch.float64)
            p = p / p.norm(dim=1, keepdim=True)
        else:
            raise ParameterError(f"unknown init mode {mode!r}")
        dtype = torch.get_default_dtype()
        self.prototypes = nn.Parameter(p.to(dtype))
        self.mu = nn.Parameter(p.clone().to(dtype))
        self.log_sigma = nn.Parameter(torch.full((n, d), math.log(sigma), dtype=dtype))
        self.stage = stage
        self.mode = mode
        self.hard_orthogonal = hard_orthogonal

    @property
    def n(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def sigma(self) -> torch.Tensor:
        return self.log_sigma.exp()

    @torch.no_grad()
    def constrain_(self):
        """Project prototypes back onto the unit sphere (and, if configured,
        onto the nearest orthonormal set)."""
        p = self.prototypes
        if self.hard_orthogonal and self.n <= self.dim:
            u, _, vh = torch.linalg.svd(p, full_matrices=False)
            p.copy_(u @ vh)
        p.div_(p.norm(dim=1, keepdim=True).clamp_min(1e-12))


def init_prototypes(n: int, d: int, mode: str = "orthogonal", rng=None, stage: int = 1) -> PrototypeBank:
    """``rng`` is an int seed, a ``torch.Generator`` or ``None``."""
    if isinstance(rng, int):
        rng = torch.Generator().manual_seed(rng)
    return PrototypeBank(n, d, mode, generator=rng, stage=stage)


def orthogonality_penalty(bank) -> torch.Tensor:
    """Squared Frobenius distance of the prototype Gram matrix from the identity."""
    p = bank.prototypes if isinstance(bank, PrototypeBank) else bank
    gram = p @ p.T
    eye = torch.eye(p.shape[0], dtype=p.dtype, device=p.device)
    return ((gram - eye) ** 2).sum()


def topk_softmax(scores: torch.Tensor, k: int):
    """Indices of the ``k`` largest scores (ties to the lowest index) and the
    softmax restricted to them."""
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices
    idx = order[..., :k]
    return idx, torch.softmax(scores.gather(-1, idx), dim=-1)


@dataclass
class RoutingDecision:
    full_posterior: torch.Tensor          # (B, N)
    selected: torch.Tensor                # (B, K1) long
    cluster_weights: torch.Tensor         # (B, K1)
    similarity: torch.Tensor              # (B, N)
    token: torch.Tensor                   # (B, D) pooled + projected features
    prompt: Optional[torch.Tensor] = None         # (B, 1, D)
    context: Optional[torch.Tensor] = None        # (B, D)
    expert_selected: Optional[torch.Tensor] = None  # (B, K1, K2) expert ids within cluster
    expert_weights: Optional[torch.Tensor] = None   # (B, K1, K2)
    expert_posterior: Optional[torch.Tensor] = None  # (B, K1, M) unrestricted pi_c


def cluster_posterior(x: torch.Tensor, bank: PrototypeBank, k1: int,
                      projection: Optional[nn.Module] = None) -> RoutingDecision:
    """Stage one: GAP -> projection -> cosine similarity -> softmax -> top-k1."""
    if not 1 <= k1 <= bank.n:
        raise ParameterError(f"k1 must be in [1, {bank.n}], got {k1}")
    pooled = x.mean(dim=(-2, -1)) if x.dim() == 4 else x
    token = projection(pooled) if projection is not None else pooled
    if token.shape[-1] != bank.dim:
        raise ShapeError(f"token width {token.shape[-1]} != prototype dim {bank.dim}")
    sim = F.normalize(token, dim=-1) @ F.normalize(bank.prototypes, dim=-1).T
    return routing_from_similarity(sim, k1, token)


def routing_from_similarity(sim: torch.Tensor, k1: int, token=None) -> RoutingDecision:
    full = torch.softmax(sim, dim=-1)
    selected, weights = topk_softmax(sim, k1)
    return RoutingDecision(full, selected, weights, sim, token)


def sample_prompt(decision: RoutingDecision, bank: PrototypeBank, rng=None,
                  stochastic: bool = False, eps: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Posterior-weighted reparameterized prompt, shape ``(B, D)``.

    ``eps`` (shape ``(B, K1, D)``) overrides the noise draw; otherwise noise is
    drawn from ``rng`` when ``stochastic`` and is zero otherwise.
    """
    mu = bank.mu[decision.selected]                 # (B, K1, D)
    if eps is None and stochastic:
        eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype, device=mu.device)
    if eps is not None:
        mu = mu + bank.sigma[decision.selected] * eps
    return (decision.cluster_weights.unsqueeze(-1) * mu).sum(dim=1)


class CrossAttention(nn.Module):
    """Multi-head scaled dot-product attention from queries onto a key/value set."""

    def __init__(self, q_dim: int, kv_dim: int, dim: int, heads: int = 1, out_dim: Optional[int] = None):
        super().__init__()
        if dim % heads:
            raise ParameterError(f"attention dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(q_dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, out_dim or dim)
        self.last_weights = None

    def forward(self, query: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        # query (B, Lq, q_dim), kv (B, Lk, kv_dim)
        if query.shape[-1] != self.q.in_features or kv.shape[-1] != self.k.in_features:
            raise ShapeError(
                f"cross-attention expects widths ({self.q.in_features}, {self.k.in_features}), "
                f"got ({query.shape[-1]}, {kv.shape[-1]})"
            )
        b, lq, _ = query.shape
        lk = kv.shape[1]
        h = self.heads
        q = self.q(query).view(b, lq, h, -1).transpose(1, 2)
        k = self.k(kv).view(b, lk, h, -1).transpose(1, 2)
        v = self.v(kv).view(b, lk, h, -1).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        self.last_weights = attn
        y = (attn @ v).transpose(1, 2).reshape(b, lq, -1)
        return self.out(y)


def gate_context(token: torch.Tensor, prompt: torch.Tensor, attn: CrossAttention) -> torch.Tensor:
    """Attend from the pooled feature token ``(B, D)`` onto prompt tokens
    ``(B, T, D)`` (or ``(B, D)`` for a single token); returns ``(B, D)``."""
    if prompt.dim() == 2:
        prompt = prompt.unsqueeze(1)
    return attn(token.unsqueeze(1), prompt).squeeze(1)


def expert_posterior(g: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, k2: int):
    """Per-cluster expert gate ``softmax(W g + b)`` and its top-k2 restriction.

    Returns ``(indices, restricted weights, full posterior)``.
    """
    logits = g @ weight.T + bias if weight.dim() == 2 else torch.einsum("...md,...d->...m", weight, g) + bias
    m = logits.shape[-1]
    if not 1 <= k2 <= m:
        raise ParameterError(f"k2 must be in [1, {m}], got {k2}")
    idx, w = topk_softmax(logits, k2)
    return idx, w, torch.softmax(logits, dim=-1)


class Expert(nn.Module):
    """Gated feed-forward expert: 1x1 expand, 3x3 depth-wise mix, GELU gate, 1x1 project."""

    def __init__(self, channels: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or channels
        self.proj_in = nn.Conv2d(channels, 2 * hidden, 1)
        self.dw = nn.Conv2d(2 * hidden, 2 * hidden, 3, padding=1, groups=2 * hidden)
        self.proj_out = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        a, b = self.dw(self.proj_in(x)).chunk(2, dim=1)
        return self.proj_out(F.gelu(a) * b)


def _mix_experts(x: torch.Tensor, experts: Sequence[nn.Module], weights: torch.Tensor) -> torch.Tensor:
    """``sum_j weights[:, j] * experts[j](x)``, evaluating each expert only on
    the samples that give it nonzero weight."""
    y = torch.zeros_like(x)
    active = weights != 0
    for j, expert in enumerate(experts):
        rows = active[:, j].nonzero().flatten()
        if rows.numel() == 0:
            continue
        xs = x if rows.numel() == x.shape[0] else x.index_select(0, rows)
        out = expert(xs)
        if out.shape != xs.shape:
            raise ShapeError(f"expert {j} changed shape {tuple(xs.shape)} -> {tuple(out.shape)}")
        w = weights.index_select(0, rows).select(1, j).view(-1, *([1] * (x.dim() - 1)))
        y = y.index_add(0, rows, w * out)
    return y


class PCGRMMoE(nn.Module):
    """Hierarchical cluster-then-expert mixture over ``n_clusters * experts_per_cluster`` experts."""

    def __init__(self, channels: int, n_clusters: int = 3, k1: int = 2, experts_per_cluster: int = 2,
                 k2: int = 2, heads: int = 1, dim: Optional[int] = None, init_mode: str = "orthogonal",
                 generator=None, stage: int = 1, experts: Optional[Sequence[nn.Module]] = None,
                 hard_orthogonal: bool = False):
        super().__init__()
        dim = dim or channels
        if not 1 <= k1 <= n_clusters:
            raise ParameterError(f"k1 must be in [1, {n_clusters}], got {k1}")
        if not 1 <= k2 <= experts_per_cluster:
            raise ParameterError(f"k2 must be in [1, {experts_per_cluster}], got {k2}")
        self.k1, self.k2 = k1, k2
        self.n_clusters, self.experts_per_cluster = n_clusters, experts_per_cluster
        self.proj = nn.Linear(channels, dim)
        self.bank = PrototypeBank(n_clusters, dim, init_mode, generator, stage, hard_orthogonal=hard_orthogonal)
        self.attn = CrossAttention(dim, dim, dim, heads)
        self.gate_weight = nn.Parameter(torch.randn(n_clusters, experts_per_cluster, dim, generator=generator)
                                        / math.sqrt(dim))
        self.gate_bias = nn.Parameter(torch.zeros(n_clusters, experts_per_cluster))
        if experts is None:
            experts = [Expert(channels) for _ in range(n_clusters * experts_per_cluster)]
        if len(experts) != n_clusters * experts_per_cluster:
            raise ParameterError("expert count must equal n_clusters * experts_per_cluster")
        self.experts = nn.ModuleList(experts)
        self.last_decision: Optional[RoutingDecision] = None

    def route(self, x, generator=None, stochastic=False, eps=None) -> RoutingDecision:
        d = cluster_posterior(x, self.bank, self.k1, self.proj)
        d.prompt = sample_prompt(d, self.bank, generator, stochastic, eps).unsqueeze(1)
        d.context = gate_context(d.token, d.prompt, self.attn)
        w = self.gate_weight[d.selected]            # (B, K1, M, D)
        b = self.gate_bias[d.selected]              # (B, K1, M)
        ctx = d.context.unsqueeze(1).expand(-1, self.k1, -1)
        d.expert_selected, d.expert_weights, d.expert_posterior = expert_posterior(ctx, w, b, self.k2)
        return d

    def combined_weights(self, d: RoutingDecision) -> torch.Tensor:
        """Dense ``(B, N*M)`` weights ``alpha_c * p(e | c)``, zero for inactive experts."""
        bsz = d.selected.shape[0]
        m = self.experts_per_cluster
        flat = d.selected.unsqueeze(-1) * m + d.expert_selected           # (B, K1, K2)
        vals = d.cluster_weights.unsqueeze(-1) * d.expert_weights
        dense = torch.zeros(bsz, self.n_clusters * m, dtype=vals.dtype, device=vals.device)
        return dense.scatter_add(1, flat.reshape(bsz, -1), vals.reshape(bsz, -1))

    def forward(self, x, generator=None, stochastic=False, eps=None):
        d = self.route(x, generator, stochastic, eps)
        self.last_decision = d
        return _mix_experts(x, self.experts, self.combined_weights(d))


def pcgrm_moe_forward(x, moe: PCGRMMoE, generator=None, stochastic=False):
    return moe(x, generator=generator, stochastic=stochastic)


def flat_moe_forward(x: torch.Tensor, experts: Sequence[nn.Module], gate_weight: torch.Tensor,
                     gate_bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Single-stage MoE: ``softmax(W GAP(x) + b)`` over all experts, dense mix."""
    pooled = x.mean(dim=(-2, -1))
    logits = pooled @ gate_weight.T
    if gate_bias is not None:
        logits = logits + gate_bias
    p = torch.softmax(logits, dim=-1)
    y = torch.zeros_like(x)
    for j, expert in enumerate(experts):
        y = y + p[:, j].view(-1, 1, 1, 1) * expert(x)
    return y


class FlatMoE(nn.Module):
    def __init__(self, channels: int, n_experts: int, experts: Optional[Sequence[nn.Module]] = None):
        super().__init__()
        self.gate = nn.Linear(channels, n_experts)
        self.experts = nn.ModuleList(experts or [Expert(channels) for _ in range(n_experts)])

    def forward(self, x, **_):
        return flat_moe_forward(x, self.experts, self.gate.weight, self.gate.bias)


def decision_records(d: RoutingDecision, stage: int, sample_ids, labels=None,
                     experts_per_cluster: Optional[int] = None) -> list:
    """Line-delimited routing trace records for one batch.

    ``experts`` holds global expert ids ``cluster * experts_per_cluster + e`` and
    ``expert_weights`` the matching mixture mass ``alpha_c * p(e | c)``.
    """
    recs = []
    for i in range(d.full_posterior.shape[0]):
        rec = {
            "stage": int(stage),
            "sample_id": str(sample_ids[i]),
            "label": labels[i] if labels is not None else None,
            "posterior": d.full_posterior[i].tolist(),
            "selected": d.selected[i].tolist(),
            "cluster_weights": d.cluster_weights[i].tolist(),
            "experts": [],
            "expert_weights": [],
        }
        if d.expert_selected is not None:
            m = experts_per_cluster or int(d.expert_posterior.shape[-1])
            for j, c in enumerate(rec["selected"]):
                for e, w in zip(d.expert_selected[i, j].tolist(), d.expert_weights[i, j].tolist()):
                    rec["experts"].append(c * m + e)
                    rec["expert_weights"].append(rec["cluster_weights"][j] * w)
        recs.append(rec)
    return recs
