"""Two-stage routing on a toy batch: cluster posterior, prompt, expert gate.

Run:  python demos/03_routing.py
"""
import torch

from clusir.routing import PCGRMMoE, decision_records, orthogonality_penalty

torch.manual_seed(0)
moe = PCGRMMoE(channels=8, n_clusters=3, k1=2, experts_per_cluster=2, k2=1,
               generator=torch.Generator().manual_seed(0))
print(f"orthogonality penalty at init: {orthogonality_penalty(moe.bank).item():.2e}")

# three feature maps with different mean offsets stand in for three degradations
x = torch.randn(3, 8, 16, 16) + torch.tensor([0.0, 2.0, -2.0]).view(3, 1, 1, 1)
y = moe(x)
d = moe.last_decision

for rec in decision_records(d, stage=1, sample_ids=["a", "b", "c"], experts_per_cluster=2):
    post = " ".join(f"{p:.3f}" for p in rec["posterior"])
    mix = ", ".join(f"e{e}:{w:.3f}" for e, w in zip(rec["experts"], rec["expert_weights"]))
    print(f"sample {rec['sample_id']}: posterior [{post}]  clusters {rec['selected']}  experts {mix}")

# only K1 * K2 experts ran per sample, and their weights sum to one
w = moe.combined_weights(d)
print("active experts per sample:", (w > 0).sum(1).tolist(), " weight sums:", w.sum(1).tolist())
print("output shape", tuple(y.shape))
