"""Latent-cache memory traffic: per-head fused decoding against a shared latent.

Runs one decode step in each mode on the same toy layer and prints the
measured loads next to the closed-form counts. Usage: ``python demos/traffic.py``.
"""

from wsvd.costmodel import CostInputs, gamma_eta
from wsvd.decode import BenchConfig, run_bench

L, E, H, HEADS, r = 256, 128, 32, 4, 8
R = r * (E // H)

print(f"L={L} E={E} H={H} heads={HEADS} per-head r={r} shared R={R}")
print(f"{'mode':<14}{'K-side loads':>16}{'V-side loads':>16}{'total loads':>14}")
reports = {}
for mode in ("fused", "shared_latent", "flash_full"):
    rep = run_bench(BenchConfig(mode=mode, seq_len=L, embed_dim=E, head_dim=H, n_heads=HEADS, rank=r, shared_rank=R))
    reports[mode] = rep
    c = rep["counters"]
    k = c.get("latent-K", c.get("full-K"))["loads"]
    v = c.get("latent-V", c.get("full-V"))["loads"]
    total = sum(s["loads"] for s in c.values())
    print(f"{mode:<14}{k:>16}{v:>16}{total:>14}   match={rep['match']}")

ge = gamma_eta(CostInputs(E=E, H=H, L=L, r=r, R=R))
print("closed form per head:", ge)
fused = reports["fused"]["counters"]["latent-K"]["loads"]
shared = reports["shared_latent"]["counters"]["latent-K"]["loads"]
print(f"latent-K load ratio fused/shared = {fused}/{shared} = {fused / shared:.4f} (r/R = {r / R:.4f})")
