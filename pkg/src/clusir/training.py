"""Training loop, losses, evaluation and the ablation matrix."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .degradations import (LABELS, DegradationSample, dataset_entries, degrade, make_sample,
                           procedural_images)
from .errors import ParameterError, TrainingError
from .metrics import ms_ssim, psnr, ssim
from .model import ClusIR, ModelConfig, load_checkpoint, restore, save_checkpoint
from .routing import orthogonality_penalty

log = logging.getLogger(__name__)

ABLATION_FLAGS = ("disable_pcgrm", "disable_dafmm", "init_mode", "cluster_counts_override")

COMPONENT_ROWS = [
    ("(a) WTB", {"disable_pcgrm": True, "disable_dafmm": True}),
    ("(b) +PCGRM-MoE", {"disable_dafmm": True}),
    ("(c) +DAFMM", {}),
]
CLUSTER_ROWS = [
    ("(1) 3-3-3-3", {"cluster_counts_override": [3, 3, 3, 3]}),
    ("(2) 2-3-4-6", {"cluster_counts_override": [2, 3, 4, 6]}),
    ("(3) 6-4-3-2", {"cluster_counts_override": [6, 4, 3, 2]}),
]
INIT_ROWS = [
    ("orthogonal", {"init_mode": "orthogonal"}),
    ("random", {"init_mode": "random"}),
]


@dataclass
class TrainConfig:
    lr: float = 2e-4
    betas: Sequence[float] = (0.9, 0.999)
    epochs: int = 20
    steps_per_epoch: Optional[int] = 100
    batch: int = 8
    lr_halve_epoch: int = 10
    loss_lambda: float = 0.4
    lambda_orth: float = 0.01
    seed: int = 0
    patch: int = 64
    tasks: Sequence[str] = ("noise", "rain", "haze")
    expansion: Dict[str, int] = field(default_factory=dict)
    task_params: Dict[str, dict] = field(default_factory=dict)
    n_clean: int = 48
    clean_size: int = 96
    val_per_task: int = 4
    val_size: int = 64
    eval_every: int = 0
    checkpoint_every: int = 500
    ablation: Dict[str, object] = field(default_factory=dict)
    model: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.tasks = tuple(self.tasks)
        self.validate()

    def validate(self):
        if not self.lr >= 0:
            raise ParameterError(f"lr must be >= 0, got {self.lr}")
        if len(self.betas) != 2 or not all(0 < b < 1 for b in self.betas):
            raise ParameterError(f"betas must lie in (0, 1), got {self.betas}")
        if self.batch < 1:
            raise ParameterError("batch must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if self.patch % 16:
            raise ParameterError("patch must be divisible by 16")
        for t in self.tasks:
            if t not in LABELS:
                raise ParameterError(f"unknown task {t!r}")
        for k in self.ablation:
            if k not in ABLATION_FLAGS:
                raise ParameterError(f"unknown ablation flag {k!r}")
        names = {f.name for f in fields(ModelConfig)}
        for k in self.model:
            if k not in names:
                raise ParameterError(f"unknown model field {k!r}")

    @classmethod
    def full_scale(cls, **kw):
        """Full-scale schedule: batch 48, 150 epochs, learning rate halved after 75."""
        base = dict(lr=2e-4, betas=(0.9, 0.999), batch=48, epochs=150, lr_halve_epoch=75,
                    steps_per_epoch=None, patch=128,
                    tasks=("noise", "haze", "rain", "blur", "lowlight"),
                    expansion={"noise": 3, "rain": 120, "blur": 5, "lowlight": 200, "haze": 1})
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["tasks"] = list(self.tasks)
        return d

    def model_config(self) -> ModelConfig:
        m = dict(self.model)
        m.setdefault("seed", self.seed)
        ab = self.ablation
        if ab.get("disable_pcgrm"):
            m["use_pcgrm"] = False
        if ab.get("disable_dafmm"):
            m["use_dafmm"] = False
        if "init_mode" in ab:
            m["init_mode"] = ab["init_mode"]
        if ab.get("cluster_counts_override") is not None:
            counts = list(ab["cluster_counts_override"])
            m["cluster_counts"] = counts
            k1 = list(m.get("k1_counts", ModelConfig.k1_counts))
            m["k1_counts"] = [min(k, n) for k, n in zip(k1, counts)]
        return ModelConfig(**m)


def load_train_config(path=None, overrides: Optional[Mapping] = None) -> TrainConfig:
    """Read a JSON config file; ``overrides`` (e.g. CLI flags) win over file values."""
    d = {}
    if path is not None:
        d = json.loads(Path(path).read_text())
    for k, v in (overrides or {}).items():
        if v is not None:
            d[k] = v
    return TrainConfig.from_dict(d)


@dataclass
class MetricsRecord:
    task: str
    psnr: float
    ssim: float
    step: int


def restoration_loss(pred, target, model=None, loss_lambda: float = 0.4, lambda_orth: float = 0.01):
    """``mean|pred - target| + lambda (1 - MS-SSIM) + lambda_orth * sum of prototype penalties``."""
    loss = (pred - target).abs().mean()
    if loss_lambda:
        loss = loss + loss_lambda * (1 - ms_ssim(pred, target))
    if model is not None and lambda_orth:
        banks = model.prototype_banks() if hasattr(model, "prototype_banks") else []
        for bank in banks:
            loss = loss + lambda_orth * orthogonality_penalty(bank)
    return loss


# ------------------------------------------------------------------- data


class TrainData:
    """Per-step batches that depend only on ``(seed, step)``."""

    def __init__(self, config: TrainConfig, clean_images=None):
        self.config = config
        self.clean = clean_images if clean_images is not None else procedural_images(
            config.n_clean, config.clean_size, seed=config.seed)
        mix = {t: len(self.clean) for t in config.tasks}
        self.entries = dataset_entries(len(self.clean), mix, config.expansion)
        if not self.entries:
            raise ParameterError("training set is empty")

    @property
    def steps_per_epoch(self):
        return self.config.steps_per_epoch or max(1, len(self.entries) // self.config.batch)

    def batch(self, step: int):
        cfg = self.config
        epoch, within = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([cfg.seed, epoch, 7]).permutation(len(self.entries))
        samples = []
        for j in range(cfg.batch):
            k = (within * cfg.batch + j) % len(perm)
            idx = int(perm[k])
            samples.append(make_sample(self.clean, self.entries[idx], cfg.patch, cfg.seed, epoch,
                                       idx + len(perm) * ((within * cfg.batch + j) // len(perm)),
                                       cfg.task_params))
        return samples


def stack(samples: Sequence[DegradationSample]):
    dtype = torch.get_default_dtype()
    x = torch.as_tensor(np.stack([s.degraded for s in samples])).to(dtype)
    y = torch.as_tensor(np.stack([s.clean for s in samples])).to(dtype)
    return x, y


def validation_set(tasks: Sequence[str], per_task: int = 4, size: int = 64, seed: int = 1000,
                   task_params: Optional[Mapping] = None) -> List[DegradationSample]:
    """Full-size (uncropped) synthetic validation images, fixed by ``seed``."""
    clean = procedural_images(per_task, size, seed=seed)
    out = []
    for t in tasks:
        for i, img in enumerate(clean):
            s = degrade(img, t, np.random.SeedSequence([seed, LABELS.index(t), i]).generate_state(1)[0],
                        (task_params or {}).get(t))
            s.sample_id = f"val-{t}-{i}"
            out.append(s)
    return out


def evaluate(model: ClusIR, samples: Sequence[DegradationSample], step: int = 0, batch: int = 4):
    """Per-task mean PSNR/SSIM of restorations and of the degraded inputs."""
    restored: Dict[str, list] = {}
    inputs: Dict[str, list] = {}
    by_shape: Dict[tuple, list] = {}
    for s in samples:
        by_shape.setdefault(s.degraded.shape, []).append(s)
    for group in by_shape.values():
        for i in range(0, len(group), batch):
            chunk = group[i:i + batch]
            x, y = stack(chunk)
            out = restore(x, model)
            for j, s in enumerate(chunk):
                restored.setdefault(s.label, []).append(
                    (psnr(out[j].double(), y[j].double()), float(ssim(out[j].double(), y[j].double()))))
                inputs.setdefault(s.label, []).append(
                    (psnr(x[j].double(), y[j].double()), float(ssim(x[j].double(), y[j].double()))))
    records = [MetricsRecord(t, float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals])), step)
               for t, vals in restored.items()]
    baseline = {t: (float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals])))
                for t, vals in inputs.items()}
    return records, baseline


# ------------------------------------------------------------------- train


@dataclass
class TrainResult:
    model: ClusIR
    losses: List[float]
    metrics: List[MetricsRecord]
    baseline: Dict[str, tuple]
    checkpoint: Optional[Path]
    step: int


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _append_metrics_csv(path: Path, records: Sequence[MetricsRecord]):
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "task", "psnr", "ssim"])
        for r in records:
            w.writerow([r.step, r.task, f"{r.psnr:.6f}", f"{r.ssim:.6f}"])


def _snapshot(model, opt):
    return copy.deepcopy(model.state_dict()), copy.deepcopy(opt.state_dict())


def train(config: TrainConfig, model: Optional[ClusIR] = None, out_dir=None, data: Optional[TrainData] = None,
          val: Optional[Sequence[DegradationSample]] = None, resume=None, max_steps: Optional[int] = None,
          callback: Optional[Callable] = None) -> TrainResult:
    """Adam training with a single learning-rate halving.

    Batches and prompt noise are pure functions of ``(seed, step)``, so a run
    resumed from a checkpoint follows the same trajectory as an uninterrupted
    one. ``max_steps`` stops early (the schedule still refers to the full run).
    """
    config.validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    losses: List[float] = []
    start = 0
    if resume is not None:
        model, payload = load_checkpoint(resume)
        start = int(payload["step"])
        losses = list(payload.get("losses", []))
    elif model is None:
        model = ClusIR(config.model_config())
    data = data or TrainData(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=tuple(config.betas))
    if resume is not None and payload.get("optimizer") is not None:
        opt.load_state_dict(payload["optimizer"])
    total = config.epochs * data.steps_per_epoch
    stop = min(total, max_steps) if max_steps is not None else total
    val = list(val) if val is not None else validation_set(config.tasks, config.val_per_task, config.val_size,
                                                          task_params=config.task_params)
    metrics: List[MetricsRecord] = []
    good = _snapshot(model, opt)
    good_step = start
    ckpt = None

    def write_ckpt(name, step, state=None):
        if out_dir is None:
            return None
        if state is not None:
            tmp_model = ClusIR(model.config)
            tmp_model.load_state_dict(state[0])
            tmp_opt = torch.optim.Adam(tmp_model.parameters(), lr=config.lr, betas=tuple(config.betas))
            tmp_opt.load_state_dict(state[1])
            return save_checkpoint(out_dir / name, tmp_model, tmp_opt,
                                   {"step": step, "losses": losses[:step], "train_config": config.to_dict()})
        return save_checkpoint(out_dir / name, model, opt,
                               {"step": step, "losses": losses, "train_config": config.to_dict()})

    model.train()
    for step in range(start, stop):
        epoch = step // data.steps_per_epoch
        _set_lr(opt, config.lr * (0.5 if epoch >= config.lr_halve_epoch else 1.0))
        x, y = stack(data.batch(step))
        gen = torch.Generator().manual_seed(int(np.random.SeedSequence([config.seed, step, 3]).generate_state(1)[0]))
        pred = model(x, generator=gen, stochastic=True)
        loss = restoration_loss(pred, y, model, config.loss_lambda, config.lambda_orth)
        if not torch.isfinite(loss):
            path = write_ckpt("last_good.pt", good_step, good)
            raise TrainingError(f"loss became {loss.item()} at step {step}", checkpoint=path, step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        model.constrain_()
        losses.append(loss.item())
        done = step + 1
        if config.checkpoint_every and done % config.checkpoint_every == 0:
            good, good_step = _snapshot(model, opt), done
            ckpt = write_ckpt("checkpoint.pt", done)
        if config.eval_every and done % config.eval_every == 0 and done < stop:
            recs, _ = evaluate(model, val, done)
            metrics.extend(recs)
            if out_dir is not None:
                _append_metrics_csv(out_dir / "metrics.csv", recs)
            model.train()
        if callback is not None:
            callback(done, losses[-1], model)
        if done % 100 == 0:
            log.info("step %d loss %.5f", done, losses[-1])

    recs, baseline = evaluate(model, val, stop)
    metrics.extend(recs)
    model.train()
    if out_dir is not None:
        ckpt = write_ckpt("checkpoint.pt", stop)
        _append_metrics_csv(out_dir / "metrics.csv", recs)
        summary = {
            "step": stop,
            "final_loss": losses[-1] if losses else None,
            "metrics": [asdict(r) for r in recs],
            "degraded_baseline": {t: {"psnr": p, "ssim": s} for t, (p, s) in baseline.items()},
            "average_psnr": float(np.mean([r.psnr for r in recs])) if recs else None,
            "train_config": config.to_dict(),
        }
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return TrainResult(model, losses, metrics, baseline, ckpt, stop)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    name: str
    per_task: Dict[str, tuple]
    average: tuple
    result: Optional[TrainResult] = None


def run_ablation(base: TrainConfig, matrix: Sequence, out_dir=None, max_steps: Optional[int] = None,
                 keep_results: bool = False) -> List[AblationRow]:
    """Train each ``(name, delta)`` variant with the shared seed.

    ``delta`` maps ablation flags to values; unknown flags raise ``ParameterError``.
    """
    variants = []
    for item in matrix:
        name, delta = item if isinstance(item, tuple) else (str(item), item)
        for k in delta:
            if k not in ABLATION_FLAGS:
                raise ParameterError(f"unknown ablation flag {k!r}")
        ab = dict(base.ablation)
        ab.update(delta)
        variants.append((name, replace(base, ablation=ab)))
    rows = []
    for name, cfg in variants:
        sub = Path(out_dir) / _slug(name) if out_dir is not None else None
        res = train(cfg, out_dir=sub, max_steps=max_steps)
        per_task = {r.task: (r.psnr, r.ssim) for r in res.metrics if r.step == res.step}
        avg = (float(np.mean([v[0] for v in per_task.values()])), float(np.mean([v[1] for v in per_task.values()])))
        rows.append(AblationRow(name, per_task, avg, res if keep_results else None))
    if out_dir is not None:
        write_ablation_table(rows, Path(out_dir) / "ablation.csv")
    return rows


def _slug(name):
    return "".join(c if c.isalnum() else "_" for c in name).strip("_")


def write_ablation_table(rows: Sequence[AblationRow], path) -> None:
    tasks = sorted({t for r in rows for t in r.per_task})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant"] + [f"{t}_psnr/ssim" for t in tasks] + ["average"])
        for r in rows:
            w.writerow([r.name] + [f"{r.per_task[t][0]:.2f}/{r.per_task[t][1]:.3f}" if t in r.per_task else ""
                                   for t in tasks] + [f"{r.average[0]:.2f}/{r.average[1]:.3f}"])


def format_table(rows: Sequence[AblationRow]) -> str:
    tasks = sorted({t for r in rows for t in r.per_task})
    head = f"{'variant':<18}" + "".join(f"{t:>16}" for t in tasks) + f"{'average':>16}"
    lines = [head]
    for r in rows:
        cells = "".join(f"{r.per_task[t][0]:>9.2f}/{r.per_task[t][1]:.3f}" if t in r.per_task else " " * 16
                        for t in tasks)
        lines.append(f"{r.name:<18}{cells}{r.average[0]:>9.2f}/{r.average[1]:.3f}")
    return "\n".join(lines)
