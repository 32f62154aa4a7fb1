"""Acceptance criteria, one test per criterion.

Each test asserts its own runtime budget. The conftest hook prints a
PASS/FAIL line per criterion at the end of the session; running this file
directly does the same.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from wsvd.costmodel import CostInputs, rho
from wsvd.decode import (
    BenchConfig, FullKVCache, LatentCache, PerHeadLayer, PerHeadModel, SharedLayer, SharedModel, TileConfig,
    TrafficCounter, append_token, baseline_decode_step, build_per_head_model, fused_decode_step, run_bench,
)
from wsvd.factorize import HeadFactors, per_head_svd, weighted_finetune, weighted_loss, weighted_loss_grads
from wsvd.fisher import collect_gradients, fisher_from_gradients, rotate_fisher
from wsvd.linalg import SkewParam, hadamard
from wsvd.model import ModelConfig, backward, batch_loss, generate_calibration, init_weights, with_weight
from wsvd.pipeline import PipelineConfig, run_pipeline
from wsvd.quant import QuantSpec, RotationPair, insert_rotations, local_qat, quantize_weight, rtn, rtn_objective


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.3f}s, budget {self.seconds}s"


def _per_head_factors(w, r):
    cfg = w.config
    out = {}
    for i, lw in enumerate(w.layers):
        for role, m in (("q", lw.wq), ("k", lw.wk), ("v", lw.wv)):
            for h in range(cfg.n_heads):
                out[(i, role, h)] = per_head_svd(m, h, r, cfg.head_dim, i, role)
    return out


def test_criterion_01_rho_formula():
    c = CostInputs(E=4096, H=128, L=1, r=64, R=64)
    rho(c)  # warm the code path; the budget applies to a single call
    t0 = time.perf_counter()
    out = rho(c)
    elapsed = time.perf_counter() - t0
    assert out["rho1"] == Fraction(515625, 1000000)
    assert out["rho2"] == Fraction(1, 2)
    assert elapsed < 1e-3


def test_criterion_02_latent_load_identity():
    with Budget(1.0):
        fused = run_bench(BenchConfig(mode="fused", seq_len=256, n_heads=4, embed_dim=128, head_dim=32, rank=8,
                                      shared_rank=32), timing=False)
        shared = run_bench(BenchConfig(mode="shared_latent", seq_len=256, n_heads=4, embed_dim=128, head_dim=32,
                                       rank=8, shared_rank=32), timing=False)
    for h in map(str, range(4)):
        assert fused["per_head"][h]["eta_measured"] == 256 * 8 == 2048
        assert shared["per_head"][h]["eta_measured"] == 256 * 32 == 8192
        ratio = Fraction(fused["per_head"][h]["eta_measured"], shared["per_head"][h]["eta_measured"])
        assert ratio == Fraction(8, 32) == Fraction(1, 4)
    assert fused["match"] and shared["match"]


def _attend(q, k, v):
    s = k @ q / np.sqrt(q.shape[0])
    p = np.exp(s - s.max())
    return (p / p.sum()) @ v


def test_criterion_03_decode_oracle_equivalence():
    configs = []
    for seed in range(32):
        rng = np.random.default_rng(seed)
        e = int(rng.choice([32, 64, 128]))
        heads = int(rng.choice([1, 2, 4]))
        length = int(rng.integers(1, 257))
        configs.append((seed, e, heads, e // heads, length))
    with Budget(30.0):
        for seed, e, heads, h, length in configs:
            cfg = ModelConfig(embed_dim=e, head_dim=h, n_heads=heads, n_layers=1, seed=seed)
            w = init_weights(cfg)
            r = int(np.random.default_rng(seed + 1000).integers(1, h + 1))
            factors = _per_head_factors(w, r)
            x = np.random.default_rng(seed + 2000).normal(size=(length, e))
            cache = LatentCache(build_per_head_model(w, factors))
            for t in range(length):
                q = append_token(cache, x[t])
            oracle = np.stack([
                _attend(x[-1] @ factors[(0, "q", hd)].product(),
                        (x @ factors[(0, "k", hd)].a) @ factors[(0, "k", hd)].b,
                        (x @ factors[(0, "v", hd)].a) @ factors[(0, "v", hd)].b)
                for hd in range(heads)
            ])
            for tile in (1, 7, 16, length):
                res = fused_decode_step(cache, q, TileConfig(tile))
                assert np.max(np.abs(res.heads - oracle)) < 1e-9, (seed, tile)

            full = _per_head_factors(w, h)
            lc, fc = LatentCache(build_per_head_model(w, full)), FullKVCache(w)
            for t in range(length):
                ql = append_token(lc, x[t])
                qf = append_token(fc, x[t])
            for tile in (1, 7, 16, length):
                a = fused_decode_step(lc, ql, TileConfig(tile))
                b = baseline_decode_step("flash_full", fc, qf, tiles=TileConfig(tile))
                assert np.max(np.abs(a.heads - b.heads)) < 1e-9, (seed, tile)


def test_criterion_04_gradient_correctness():
    eps = 1e-6
    with Budget(30.0):
        cfg = ModelConfig(embed_dim=64, head_dim=16, n_heads=4, n_layers=2, seed=11)
        w = init_weights(cfg)
        batch = generate_calibration(cfg, 2, 8)
        grads = backward(w, batch)
        rng = np.random.default_rng(0)
        for name, m in w.items():
            for k in rng.choice(m.size, 32, replace=False):
                i, j = divmod(int(k), m.shape[1])
                plus, minus = m.copy(), m.copy()
                plus[i, j] += eps
                minus[i, j] -= eps
                fd = (batch_loss(with_weight(w, name, plus), batch)
                      - batch_loss(with_weight(w, name, minus), batch)) / (2 * eps)
                a = grads.get(name)[i, j]
                assert abs(a - fd) / max(abs(a), abs(fd)) < 1e-5, (name, i, j, a, fd)

        # The weighted objective is quadratic in any single factor entry, so the
        # central difference is exact up to rounding; a larger step keeps
        # cancellation error well below the tolerance.
        step = 1e-3
        for seed in range(4):
            rng = np.random.default_rng(seed)
            tgt, f = rng.normal(size=(8, 4)), rng.uniform(0.1, 3.0, size=(8, 4))
            a, b = rng.normal(size=(8, 2)), rng.normal(size=(2, 4))
            ga, gb = weighted_loss_grads(tgt, f, a, b)
            for mat, grad, first in ((a, ga, True), (b, gb, False)):
                for idx in np.ndindex(mat.shape):
                    plus, minus = mat.copy(), mat.copy()
                    plus[idx] += step
                    minus[idx] -= step
                    lp = weighted_loss(tgt, f, plus, b) if first else weighted_loss(tgt, f, a, plus)
                    lm = weighted_loss(tgt, f, minus, b) if first else weighted_loss(tgt, f, a, minus)
                    fd = (lp - lm) / (2 * step)
                    assert abs(grad[idx] - fd) / max(abs(grad[idx]), abs(fd)) < 1e-6


def _toy_head_problem(seed, e=64, h=16, n_samples=16):
    """A K-projection head slice with its calibration Fisher and per-sample gradients."""
    cfg = ModelConfig(embed_dim=e, head_dim=h, n_heads=e // h, n_layers=1, seed=seed, outlier_channels=(3, 17))
    w = init_weights(cfg)
    batch = generate_calibration(cfg, n_samples, 16)
    grads = [g[:, :h] for g in collect_gradients(w, batch, ["layers.0.wk"])["layers.0.wk"]]
    return w.layers[0].wk[:, :h].copy(), grads


def test_criterion_05_weighted_finetune_dominance():
    with Budget(60.0):
        for seed in range(8):
            target, grads = _toy_head_problem(seed)
            f = fisher_from_gradients(grads).scores
            assert np.ptp(f) > 0
            init = per_head_svd(target, 0, 4, 16)
            _, rep = weighted_finetune(init, target, f)
            assert rep.final_loss < rep.initial_loss, seed

            _, rep_u = weighted_finetune(init, target, np.ones_like(f))
            assert abs(rep_u.final_loss - rep_u.initial_loss) / rep_u.initial_loss < 1e-10, seed


def test_criterion_06_rotation_identity():
    with Budget(5.0):
        s1 = hadamard(64)
        for seed in range(16):
            rng = np.random.default_rng(seed)
            f = HeadFactors(rng.normal(size=(64, 8)), rng.normal(size=(8, 16)))
            pair = RotationPair(s1, SkewParam.random(8, rng))
            at, bt = insert_rotations(f, pair)
            x = rng.normal(size=(10, 64))
            assert np.max(np.abs((x @ s1.T) @ at @ bt - x @ f.a @ f.b)) < 1e-9


def test_criterion_07_qat_improvement():
    spec = QuantSpec(weight_bits=8, activation_bits=8)
    s1 = hadamard(64)
    with Budget(120.0):
        for seed in range(8):
            target, grads = _toy_head_problem(100 + seed)
            f = fisher_from_gradients(grads).scores
            f_rot = rotate_fisher(grads, s1)
            tuned, _ = weighted_finetune(per_head_svd(target, 0, 8, 16), target, f)
            pair = RotationPair(s1, SkewParam.zeros(8))
            baseline = rtn_objective(tuned, pair, target, f_rot, spec)
            _, rep = local_qat(tuned, pair, target, f_rot, steps=50, lr=1e-5, spec=spec)
            assert rep.steps == 50
            assert rep.final_loss <= baseline, seed
            assert rep.extra["max_orthogonality_error"] < 1e-10


def test_criterion_08_quantization_bounds():
    spec = QuantSpec()
    with Budget(5.0):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            w = rng.standard_t(3, size=(32, 24))
            for bits in (4, 8):
                qt = rtn(w, bits, 1.0)
                assert np.all(np.abs(w - qt.dequantize()) <= qt.scale / 2 * (1 + 1e-12))
            base = np.sum((w - rtn(w, 8, 1.0).dequantize()) ** 2)
            assert np.sum((w - quantize_weight(w, spec).dequantize()) ** 2) <= base


def _synthetic_layer_models(e, h, r, big_r, seed):
    """Random per-head and shared-latent single-layer models (no SVD needed at this size)."""
    rng = np.random.default_rng(seed)
    n = e // h
    cfg = ModelConfig(embed_dim=e, head_dim=h, n_heads=n, n_layers=1, seed=seed)
    wo = rng.normal(size=(e, e)) / np.sqrt(e)
    dummy1, dummy2 = np.zeros((e, 1)), np.zeros((1, e))  # feed-forward is outside a decode step
    mk = lambda role, hd: HeadFactors(rng.normal(size=(e, r)) / np.sqrt(e), rng.normal(size=(r, h)), 0, role, hd)
    per_head = PerHeadModel(cfg, [PerHeadLayer([mk("q", i) for i in range(n)], [mk("k", i) for i in range(n)],
                                               [mk("v", i) for i in range(n)], wo, dummy1, dummy2)])
    shared = SharedModel(cfg, [SharedLayer(
        rng.normal(size=(e, e)) / np.sqrt(e),
        rng.normal(size=(e, big_r)) / np.sqrt(e), rng.normal(size=(big_r, e)) / np.sqrt(big_r),
        rng.normal(size=(e, big_r)) / np.sqrt(e), rng.normal(size=(big_r, e)) / np.sqrt(big_r),
        wo, dummy1, dummy2)], big_r)
    return per_head, shared


def test_criterion_09_traffic_ratio_at_reference_configuration(capsys):
    e, h, r = 4096, 128, 64
    big_r = r * e // h  # R / E == r / H == 1/2
    length = 32
    per_head, shared = _synthetic_layer_models(e, h, r, big_r, seed=0)
    common = dict(seq_len=length, tile=16, n_heads=e // h, embed_dim=e, head_dim=h, rank=r, shared_rank=big_r)
    fused = run_bench(BenchConfig(mode="fused", **common), model=per_head)
    base = run_bench(BenchConfig(mode="shared_latent", **common), model=shared)
    assert fused["match"] and base["match"]
    assert fused["analytic"]["rho2"] == 0.5
    for hd in map(str, range(e // h)):
        ratio = Fraction(fused["per_head"][hd]["eta_measured"], base["per_head"][hd]["eta_measured"])
        assert ratio == Fraction(r, big_r)
    with capsys.disabled():
        print(f"\n  fused decode step wall-clock {fused['wall_ms']:.2f} ms vs shared-latent "
              f"{base['wall_ms']:.2f} ms (CPU, informational)")


def test_criterion_10_pipeline_determinism(tmp_path):
    with Budget(120.0):
        cfg = PipelineConfig()
        run_pipeline(cfg, tmp_path / "a")
        run_pipeline(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
