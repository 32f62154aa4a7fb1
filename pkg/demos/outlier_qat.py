"""Quantizing a compressed head whose inputs carry outlier channels.

Compares plain round-to-nearest, the Hadamard-rotated round-to-nearest
baseline and local QAT on the rotated factors, all scored by the same
Fisher-weighted error. Usage: ``python demos/outlier_qat.py``.
"""

import numpy as np

from wsvd.factorize import per_head_svd, weighted_finetune, weighted_loss
from wsvd.fisher import collect_gradients, fisher_from_gradients, rotate_fisher
from wsvd.linalg import SkewParam, hadamard
from wsvd.model import ModelConfig, generate_calibration, init_weights
from wsvd.quant import QuantSpec, RotationPair, local_qat, rtn, rtn_objective

E, H, RANK = 64, 16, 8
cfg = ModelConfig(embed_dim=E, head_dim=H, n_heads=E // H, n_layers=1, seed=3, outlier_channels=(3, 17))
weights = init_weights(cfg)
batch = generate_calibration(cfg, 16, 16)
grads = [g[:, :H] for g in collect_gradients(weights, batch, ["layers.0.wk"])["layers.0.wk"]]
target = weights.layers[0].wk[:, :H].copy()

fisher = fisher_from_gradients(grads).scores
s1 = hadamard(E)
fisher_rot = rotate_fisher(grads, s1)
tuned, ft = weighted_finetune(per_head_svd(target, 0, RANK, H), target, fisher)
print(f"fine-tune weighted loss {ft.initial_loss:.6g} -> {ft.final_loss:.6g}")

spec = QuantSpec(weight_bits=4, activation_bits=8)
qa = rtn(tuned.a, spec.weight_bits).dequantize()
qb = rtn(tuned.b, spec.weight_bits).dequantize()
print(f"plain RTN (no rotation)       {weighted_loss(target, fisher, qa, qb):.6g}")

pair = RotationPair(s1, SkewParam.zeros(RANK))
print(f"rotated RTN                   {rtn_objective(tuned, pair, target, fisher_rot, spec):.6g}")
_, rep = local_qat(tuned, pair, target, fisher_rot, steps=50, lr=1e-5, spec=spec)
print(f"local QAT ({rep.steps} steps)         {rep.final_loss:.6g}")
print("rotation orthogonality error", np.format_float_scientific(rep.extra["max_orthogonality_error"], 2))
