"""Routing statistics, prototype affinity maps, embedding exports and spectrum dumps.

Every function that draws a figure also writes the numbers behind it as CSV.
"""
from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParameterError, StateError
from .model import ClusIR, _to_tensor
from .routing import PrototypeBank, decision_records
from .training import stack
from .wavelets import amp_phase, high_band_energy_fraction


@dataclass
class RoutingTrace:
    stage: int
    sample_id: str
    label: Optional[str]
    posterior: List[float]
    selected: List[int]
    expert_weights: List[float] = field(default_factory=list)
    experts: List[int] = field(default_factory=list)
    cluster_weights: List[float] = field(default_factory=list)

    @classmethod
    def from_record(cls, rec):
        return cls(rec["stage"], rec["sample_id"], rec.get("label"), list(rec["posterior"]),
                   list(rec["selected"]), list(rec.get("expert_weights") or []),
                   list(rec.get("experts") or []), list(rec.get("cluster_weights") or []))


def write_traces(traces: Iterable[RoutingTrace], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for t in traces:
            fh.write(json.dumps(asdict(t)) + "\n")
    return path


def read_traces(path) -> List[RoutingTrace]:
    with Path(path).open() as fh:
        return [RoutingTrace.from_record(json.loads(line)) for line in fh if line.strip()]


@torch.no_grad()
def _run(model: ClusIR, x):
    was = model.training
    model.eval()
    model.record = True
    try:
        model(x)
    finally:
        model.record = False
        model.train(was)
    return model.trace


@torch.no_grad()
def collect_traces(model: ClusIR, samples, batch: int = 8) -> List[RoutingTrace]:
    """Deterministic forward passes over ``samples`` recording every stage's routing."""
    if not model.moe_blocks():
        raise StateError("model has no routing blocks")
    out = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        x, _ = stack(chunk)
        trace = _run(model, x)
        ids = [s.sample_id or str(i + j) for j, s in enumerate(chunk)]
        labels = [s.label for s in chunk]
        for stage, (d, moe) in enumerate(zip(trace["decisions"], model.moe_blocks()), start=1):
            for rec in decision_records(d, stage, ids, labels, moe.experts_per_cluster):
                out.append(RoutingTrace.from_record(rec))
    return out


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def purity(clusters: Sequence[int], labels: Sequence) -> float:
    """Fraction of samples whose label is the majority label of their cluster."""
    if len(clusters) == 0:
        raise ParameterError("purity of an empty assignment")
    groups = defaultdict(Counter)
    for c, lab in zip(clusters, labels):
        groups[c][lab] += 1
    return sum(cnt.most_common(1)[0][1] for cnt in groups.values()) / len(clusters)


def routing_stats(traces: Sequence[RoutingTrace]) -> Dict[int, dict]:
    """Per-stage posterior entropy, argmax-cluster purity and expert utilization."""
    if not traces:
        raise ParameterError("routing_stats needs at least one trace")
    by_stage = defaultdict(list)
    for t in traces:
        by_stage[t.stage].append(t)
    stats = {}
    for stage, ts in sorted(by_stage.items()):
        n = len(ts[0].posterior)
        ents = np.array([entropy(t.posterior) for t in ts])
        argmax = [int(np.argmax(t.posterior)) for t in ts]
        hist = np.bincount(argmax, minlength=n).astype(float)
        n_exp = max([max(t.experts) for t in ts if t.experts] or [-1]) + 1
        util = np.zeros(max(n_exp, 0))
        for t in ts:
            for e, w in zip(t.experts, t.expert_weights):
                util[e] += w
        stats[stage] = {
            "count": len(ts),
            "entropy_mean": float(ents.mean()),
            "entropy_std": float(ents.std()),
            "entropy_max": math.log(n),
            "argmax_histogram": hist.tolist(),
            "argmax_entropy": entropy(hist / hist.sum()),
            "purity": purity(argmax, [t.label for t in ts]) if all(t.label is not None for t in ts) else None,
            "expert_utilization": (util / util.sum()).tolist() if util.sum() > 0 else util.tolist(),
        }
    return stats


def write_stats_csv(stats: Dict[int, dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "count", "entropy_mean", "entropy_std", "argmax_entropy", "purity",
                    "argmax_histogram", "expert_utilization"])
        for stage, s in stats.items():
            w.writerow([stage, s["count"], s["entropy_mean"], s["entropy_std"], s["argmax_entropy"], s["purity"],
                        " ".join(f"{v:g}" for v in s["argmax_histogram"]),
                        " ".join(f"{v:.4f}" for v in s["expert_utilization"])])
    return path


# ------------------------------------------------------------- prototypes


def prototype_mse_matrix(bank) -> np.ndarray:
    """Pairwise mean squared difference between prototype rows."""
    p = bank.prototypes if isinstance(bank, PrototypeBank) else bank
    p = torch.as_tensor(p).detach().double()
    diff = p[:, None, :] - p[None, :, :]
    return (diff**2).mean(dim=-1).numpy()


def max_offdiag_cosine(bank) -> float:
    p = bank.prototypes if isinstance(bank, PrototypeBank) else bank
    p = F.normalize(torch.as_tensor(p).detach().double(), dim=1)
    g = (p @ p.T).abs()
    g.fill_diagonal_(0)
    return float(g.max())


def _heatmap_grid(mats, titles, path, cmap="viridis"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(mats), figsize=(3 * len(mats), 3), squeeze=False)
    for ax, m, title in zip(axes[0], mats, titles):
        im = ax.imshow(m, cmap=cmap)
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_matrix_csv(mat, path):
    np.savetxt(path, np.asarray(mat), delimiter=",", fmt="%.8g")


def plot_prototype_mse(banks: Sequence, out_dir, prefix="prototype_mse") -> List[np.ndarray]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mats = [prototype_mse_matrix(b) for b in banks]
    for i, m in enumerate(mats, start=1):
        write_matrix_csv(m, out_dir / f"{prefix}_stage{i}.csv")
    _heatmap_grid(mats, [f"stage {i}" for i in range(1, len(mats) + 1)], out_dir / f"{prefix}.png", "magma")
    return mats


# ----------------------------------------------------------- affinity map


@torch.no_grad()
def affinity_map(img, model: ClusIR, stage: int, out_dir=None, normalize: bool = True):
    """Per-pixel cosine similarity between routed stage features and every prototype.

    Returns ``(raw, heat)``: raw similarities in [-1, 1] of shape ``(N, h, w)``
    and, if ``normalize``, each map min-max scaled to [0, 1].
    """
    blocks = model.moe_blocks()
    if not 1 <= stage <= len(blocks):
        raise ParameterError(f"stage must be in [1, {len(blocks)}], got {stage}")
    x = _to_tensor(img)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    _run(model, x[:1])
    feat = model.encoders[stage - 1].last_moe_input[0]        # (C, h, w)
    moe = blocks[stage - 1]
    tokens = moe.proj(feat.permute(1, 2, 0))                    # (h, w, D)
    sim = F.normalize(tokens, dim=-1) @ F.normalize(moe.bank.prototypes, dim=-1).T
    raw = sim.permute(2, 0, 1).double().numpy()
    heat = raw
    if normalize:
        lo = raw.min(axis=(1, 2), keepdims=True)
        span = raw.max(axis=(1, 2), keepdims=True) - lo
        heat = np.where(span > 0, (raw - lo) / np.where(span > 0, span, 1), 0.0)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for c in range(raw.shape[0]):
            write_matrix_csv(raw[c], out_dir / f"affinity_stage{stage}_proto{c}.csv")
        _heatmap_grid(list(heat), [f"prototype {c}" for c in range(raw.shape[0])],
                      out_dir / f"affinity_stage{stage}.png", "inferno")
    return raw, heat


# ------------------------------------------------------------- embeddings


@torch.no_grad()
def stage_embeddings(model: ClusIR, samples, stage: int, batch: int = 8):
    """Pooled post-routing stage features, one row per sample."""
    if not 1 <= stage <= 4:
        raise ParameterError(f"stage must be in [1, 4], got {stage}")
    rows = []
    for i in range(0, len(samples), batch):
        x, _ = stack(samples[i:i + batch])
        trace = _run(model, x)
        rows.append(trace["features"][stage - 1].mean(dim=(-2, -1)).double().numpy())
    return np.concatenate(rows, axis=0)


def export_embeddings(model: ClusIR, samples, stage: int, path=None):
    feats = stage_embeddings(model, samples, stage)
    ids = [s.sample_id or str(i) for i, s in enumerate(samples)]
    labels = [s.label for s in samples]
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label"] + [f"f{j}" for j in range(feats.shape[1])])
            for sid, lab, row in zip(ids, labels, feats):
                w.writerow([sid, lab] + [f"{v:.8g}" for v in row])
    return ids, labels, feats


def read_embeddings(path):
    with Path(path).open() as fh:
        r = csv.reader(fh)
        next(r)
        rows = list(r)
    return [row[0] for row in rows], [row[1] for row in rows], np.array([[float(v) for v in row[2:]] for row in rows])


def pca_2d(features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    proj = x @ vt[:2].T
    # fix component signs for determinism
    signs = np.sign(proj[np.argmax(np.abs(proj), axis=0), range(proj.shape[1])])
    return proj * np.where(signs == 0, 1, signs)


def separability_ratio(features, labels) -> float:
    """Mean distance between label centroids over mean distance of samples to
    their own centroid."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = sorted(set(labels.tolist()))
    if len(uniq) < 2:
        raise ParameterError("separability needs at least two labels")
    cents = {u: x[labels == u].mean(axis=0) for u in uniq}
    between = np.mean([np.linalg.norm(cents[a] - cents[b]) for i, a in enumerate(uniq) for b in uniq[i + 1:]])
    within = np.mean([np.linalg.norm(row - cents[lab]) for row, lab in zip(x, labels)])
    return float(between / within) if within > 0 else math.inf


def plot_embedding(features, labels, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xy = pca_2d(features)
    fig, ax = plt.subplots(figsize=(4, 4))
    for lab in sorted(set(labels)):
        m = np.asarray(labels) == lab
        ax.scatter(xy[m, 0], xy[m, 1], s=12, label=lab)
    ax.legend(fontsize=8)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    with Path(path).with_suffix(".csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "pc1", "pc2"])
        for lab, (a, b) in zip(labels, xy):
            w.writerow([lab, f"{a:.8g}", f"{b:.8g}"])


# ---------------------------------------------------------------- spectra


def log_amplitude(x: torch.Tensor) -> np.ndarray:
    """Channel-averaged, centred log(1 + |FFT|) of a ``(C, H, W)`` map."""
    a = amp_phase(x.double()).amplitude.mean(dim=0)
    return torch.fft.fftshift(torch.log1p(a)).numpy()


@torch.no_grad()
def spectrum_dump(img, model: ClusIR, level: int = 1, out_dir=None) -> dict:
    """Log-amplitude spectra of the LL band, mined low part and mined high part
    inside the frequency module of decoder ``level``."""
    if not 1 <= level <= 3:
        raise ParameterError(f"level must be in [1, 3], got {level}")
    dafmm = model.decoders[level - 1].dafmm
    if dafmm is None:
        raise StateError("model was built without frequency modulation")
    x = _to_tensor(img)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    _run(model, x[:1])
    parts = {k: v[0] for k, v in dafmm.last.items()}
    spectra = {k: log_amplitude(v) for k, v in parts.items()}
    fractions = {k: float(high_band_energy_fraction(v).mean()) for k, v in parts.items()}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for k, s in spectra.items():
            write_matrix_csv(s, out_dir / f"spectrum_level{level}_{k}.csv")
        _heatmap_grid([spectra[k] for k in ("ll", "low", "high")], ["LL band", "mined low", "mined high"],
                      out_dir / f"spectrum_level{level}.png", "gray")
        (out_dir / f"spectrum_level{level}_energy.json").write_text(json.dumps(fractions, indent=2))
    return {"spectra": spectra, "high_band_fraction": fractions}
