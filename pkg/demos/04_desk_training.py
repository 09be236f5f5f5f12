"""A short training run followed by evaluation and routing diagnostics.

Run:  python demos/04_desk_training.py [steps] [out_dir]

The full desk schedule is 2000 steps; a few hundred already show the trend.
"""
import sys
from pathlib import Path

from clusir import diagnostics as diag
from clusir.training import TrainConfig, train, validation_set

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out/desk")

cfg = TrainConfig(epochs=1, steps_per_epoch=steps, checkpoint_every=0)
res = train(cfg, out_dir=out)
print(f"trained {res.step} steps, final loss {res.losses[-1]:.4f}")
for r in res.metrics:
    p0, _ = res.baseline[r.task]
    print(f"{r.task:>6}: {p0:6.2f} dB -> {r.psnr:6.2f} dB   ssim {r.ssim:.3f}")

samples = validation_set(cfg.tasks, per_task=10, size=64, seed=7)
stats = diag.routing_stats(diag.collect_traces(res.model, samples))
for stage, s in stats.items():
    print(f"stage {stage}: purity {s['purity']:.2f}  mean entropy {s['entropy_mean']:.3f} / {s['entropy_max']:.3f}")

_, labels, feats = diag.export_embeddings(res.model, samples, 1, out / "embed_stage1.csv")
diag.plot_embedding(feats, labels, out / "embed_stage1.png")
diag.plot_prototype_mse(res.model.prototype_banks(), out)
diag.spectrum_dump(samples[0].degraded, res.model, 1, out)
print(f"separability ratio at stage 1: {diag.separability_ratio(feats, labels):.2f}; figures in {out}")
