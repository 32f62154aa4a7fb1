"""End-to-end run of every stage on a small seeded model.

Writes checkpoints, Fisher scores and report.json under the given
directory (default ``wsvd_demo``) and prints the task loss after each stage.
Usage: ``python demos/walkthrough.py [out_dir]``.
"""

import json
import sys

from wsvd.pipeline import PipelineConfig, run_pipeline

out = sys.argv[1] if len(sys.argv) > 1 else "wsvd_demo"
cfg = PipelineConfig(ft_steps=100, qat_steps=50, n_samples=16, seq_len=32)
report = run_pipeline(cfg, out)

print(f"artifacts in {out}/")
for stage, loss in report["task_loss"].items():
    print(f"  task loss after {stage:<10} {loss:.6f}")
plan = report["rank_plan"]
print(f"rho1 {plan['rho1']:.4f} (target {plan['target_rho1']}), rho2 {plan['rho2']:.4f}")
print("per-head ranks:", json.dumps(plan["ranks"]))
print("fused decode vs dense, max abs error:", report["decode"]["max_abs_error_vs_dense"])
print("fused/shared latent load ratio:", report["decode"]["latent_load_ratio_fused_vs_shared"])
