"""Checkpoint stages and the end-to-end compression pipeline.

Stage order: dense -> Fisher -> per-head SVD + rank allocation ->
weighted fine-tuning -> rotations + local QAT -> decode report. Every stage
reads its predecessor from disk, so any stage can be rerun on its own.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .decode import (
    BenchConfig, PerHeadModel, TileConfig, TrafficCounter, build_per_head_model, build_shared_model,
    decode_sequence, run_bench,
)
from .errors import ConfigError
from .factorize import (
    FT_LR, FT_STEPS, HeadFactors, RankPlan, allocate_ranks, head_svd, per_head_svd, rank_gains,
    weighted_finetune, weighted_loss,
)
from .fisher import FisherScores, collect_gradients, fisher_from_gradients
from .linalg import SkewParam, hadamard
from .model import (
    ROLES, AttentionWeights, LayerWeights, ModelConfig, WEIGHT_KEYS, batch_loss, forward,
    generate_calibration, head_slice, init_weights, weight_name,
)
from .quant import QAT_LR, QAT_STEPS, QuantizedFactors, QuantizedTensor, QuantSpec, RotationPair, local_qat, rtn_objective

log = logging.getLogger(__name__)

SCHEMA = "wsvd-pipeline/1"
CHECKPOINT_FORMAT = "wsvd-checkpoint"
OUTPUT_ENV = "WSVD_OUTPUT_DIR"


def _key_str(key) -> str:
    layer, role, head = key
    return f"{layer}.{role}.{head}"


def _parse_key(s: str):
    layer, role, head = s.split(".")
    return int(layer), role, int(head)


def _map(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# checkpoints


def save_dense(path, weights: AttentionWeights, extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, w in weights.items():
        io.save_matrix(path / f"{name}.mat", w)
        tensors[name] = f"{name}.mat"
    manifest = {"format": CHECKPOINT_FORMAT, "version": 1, "stage": "dense",
                "config": weights.config.to_dict(), "tensors": tensors}
    manifest.update(extra or {})
    io.dump_json(path / "manifest.json", manifest)


def load_manifest(path) -> dict:
    m = io.load_json(Path(path) / "manifest.json")
    if m.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} directory")
    return m


def load_dense(path) -> AttentionWeights:
    path = Path(path)
    m = load_manifest(path)
    cfg = ModelConfig.from_dict(m["config"])
    layers = []
    for i in range(cfg.n_layers):
        layers.append(LayerWeights(**{k: io.load_matrix(path / m["tensors"][f"layers.{i}.{k}"]) for k in WEIGHT_KEYS}))
    return AttentionWeights(cfg, layers)


def save_factored(path, weights: AttentionWeights, factors: dict, plan: RankPlan, stage: str, extra: dict | None = None):
    path = Path(path)
    save_dense(path, weights)
    (path / "factors").mkdir(exist_ok=True)
    entries = {}
    for key in sorted(factors):
        f: HeadFactors = factors[key]
        ks = _key_str(key)
        io.save_matrix(path / "factors" / f"{ks}.a.mat", f.a)
        io.save_matrix(path / "factors" / f"{ks}.b.mat", f.b)
        entries[ks] = {"a": f"factors/{ks}.a.mat", "b": f"factors/{ks}.b.mat", "rank": f.rank}
    m = load_manifest(path)
    m.update({"stage": stage, "plan": plan.to_dict(), "factors": entries})
    m.update(extra or {})
    io.dump_json(path / "manifest.json", m)


def load_factored(path):
    path = Path(path)
    m = load_manifest(path)
    if m["stage"] not in ("factored", "finetuned"):
        raise ConfigError(f"{path} holds a '{m['stage']}' checkpoint, expected factored or finetuned")
    weights = load_dense(path)
    factors = {}
    for ks, e in m["factors"].items():
        layer, role, head = _parse_key(ks)
        factors[(layer, role, head)] = HeadFactors(io.load_matrix(path / e["a"]), io.load_matrix(path / e["b"]),
                                                   layer, role, head)
    return weights, factors, RankPlan.from_dict(m["plan"]), m


def save_quantized(path, weights: AttentionWeights, qfactors: dict, plan: RankPlan, extra: dict | None = None):
    path = Path(path)
    save_dense(path, weights)
    (path / "factors").mkdir(exist_ok=True)
    entries = {}
    for key in sorted(qfactors):
        qf: QuantizedFactors = qfactors[key]
        ks = _key_str(key)
        base = path / "factors" / ks
        io.save_int8(f"{base}.a.i8", qf.a.q)
        io.save_int8(f"{base}.b.i8", qf.b.q)
        io.save_matrix(f"{base}.a.scale.mat", qf.a.scale[None, :])
        io.save_matrix(f"{base}.b.scale.mat", qf.b.scale[None, :])
        io.save_matrix(f"{base}.theta.mat", qf.pair.s2_param.theta)
        entries[ks] = {
            "a": f"factors/{ks}.a.i8", "b": f"factors/{ks}.b.i8",
            "a_scale": f"factors/{ks}.a.scale.mat", "b_scale": f"factors/{ks}.b.scale.mat",
            "theta": f"factors/{ks}.theta.mat", "clip_a": qf.a.clip, "clip_b": qf.b.clip,
            "wbits": qf.a.bits, "abits": qf.activation_bits, "rank": qf.rank,
        }
    m = load_manifest(path)
    m.update({"stage": "quantized", "plan": plan.to_dict(), "s1": "hadamard", "factors": entries})
    m.update(extra or {})
    io.dump_json(path / "manifest.json", m)


def load_quantized(path):
    path = Path(path)
    m = load_manifest(path)
    if m["stage"] != "quantized":
        raise ConfigError(f"{path} holds a '{m['stage']}' checkpoint, expected quantized")
    weights = load_dense(path)
    s1 = hadamard(weights.config.embed_dim)
    qfactors = {}
    for ks, e in m["factors"].items():
        layer, role, head = _parse_key(ks)
        qa = QuantizedTensor(io.load_int8(path / e["a"]), io.load_matrix(path / e["a_scale"])[0], e["clip_a"], e["wbits"])
        qb = QuantizedTensor(io.load_int8(path / e["b"]), io.load_matrix(path / e["b_scale"])[0], e["clip_b"], e["wbits"])
        pair = RotationPair(s1, SkewParam(io.load_matrix(path / e["theta"])))
        qfactors[(layer, role, head)] = QuantizedFactors(qa, qb, pair, e["abits"], layer, role, head)
    return weights, qfactors, RankPlan.from_dict(m["plan"]), m


# fisher artifacts


def qkv_names(cfg: ModelConfig) -> list[str]:
    return [weight_name(i, role) for i in range(cfg.n_layers) for role in ROLES]


def compute_fisher(weights: AttentionWeights, batch, out_dir, seed: int) -> dict[str, tuple[FisherScores, FisherScores]]:
    """Plain and Hadamard-rotated Fisher scores for every Q/K/V projection, written to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = qkv_names(weights.config)
    grads = collect_gradients(weights, batch, names)
    s1 = hadamard(weights.config.embed_dim)
    result = {}
    for name in names:
        plain = fisher_from_gradients(grads[name], name)
        rotated = fisher_from_gradients(grads[name], name, s1=s1)
        io.save_matrix(out_dir / f"{name}.mat", plain.scores)
        io.dump_json(out_dir / f"{name}.json", plain.sidecar(seed))
        io.save_matrix(out_dir / f"{name}.rot.mat", rotated.scores)
        io.dump_json(out_dir / f"{name}.rot.json", {**rotated.sidecar(seed), "rotation": "hadamard"})
        result[name] = (plain, rotated)
    return result


def load_fisher(fisher_dir, name: str, rotated: bool = False) -> FisherScores:
    fisher_dir = Path(fisher_dir)
    stem = f"{name}.rot" if rotated else name
    side = io.load_json(fisher_dir / f"{stem}.json")
    return FisherScores(io.load_matrix(fisher_dir / f"{stem}.mat"), side["sample_count"], name)


# stages


def stage_compress(weights: AttentionWeights, fisher_dir, rho1: float, uniform: bool = False):
    cfg = weights.config
    e, h = cfg.embed_dim, cfg.head_dim
    spectra, gains = {}, {}
    for i in range(cfg.n_layers):
        for role in ROLES:
            name = weight_name(i, role)
            w = weights.get(name)
            fs = load_fisher(fisher_dir, name) if fisher_dir is not None else None
            for head in range(cfg.n_heads):
                s = head_svd(w, head, h)
                spectra[(i, role, head)] = s
                gains[(i, role, head)] = rank_gains(s.sigma, None if fs is None else fs.head(head, h))
    plan = allocate_ranks(gains, e, h, rho1, uniform=uniform)
    factors = {}
    for key, s in spectra.items():
        layer, role, head = key
        factors[key] = per_head_svd(weights.get(weight_name(layer, role)), head, plan.ranks[key], h, layer, role,
                                    decomposition=s)
    return factors, plan


def stage_finetune(weights: AttentionWeights, factors: dict, fisher_dir, steps: int = FT_STEPS, lr: float = FT_LR,
                   jobs: int = 1):
    h = weights.config.head_dim
    fisher = {name: load_fisher(fisher_dir, name) for name in qkv_names(weights.config)}

    def run(key):
        layer, role, head = key
        name = weight_name(layer, role)
        target = head_slice(weights.get(name), head, h)
        return weighted_finetune(factors[key], target, fisher[name].head(head, h), steps, lr)

    keys = sorted(factors)
    results = _map(run, keys, jobs)
    tuned = {k: r[0] for k, r in zip(keys, results)}
    reports = {_key_str(k): r[1].to_dict() for k, r in zip(keys, results)}
    return tuned, reports


def stage_qat(weights: AttentionWeights, factors: dict, fisher_dir, spec: QuantSpec, steps: int = QAT_STEPS,
              lr: float = QAT_LR, jobs: int = 1):
    cfg = weights.config
    h = cfg.head_dim
    s1 = hadamard(cfg.embed_dim)
    fisher = {name: load_fisher(fisher_dir, name, rotated=True) for name in qkv_names(cfg)}

    def run(key):
        layer, role, head = key
        name = weight_name(layer, role)
        target = head_slice(weights.get(name), head, h)
        f_rot = fisher[name].head(head, h)
        pair = RotationPair(s1, SkewParam.zeros(factors[key].rank))
        baseline = rtn_objective(factors[key], pair, target, f_rot, spec)
        qf, rep = local_qat(factors[key], pair, target, f_rot, steps, lr, spec)
        rep.extra["rtn_objective"] = baseline
        return qf, rep

    keys = sorted(factors)
    results = _map(run, keys, jobs)
    return {k: r[0] for k, r in zip(keys, results)}, {_key_str(k): r[1].to_dict() for k, r in zip(keys, results)}


def effective_weights(weights: AttentionWeights, factors: dict) -> AttentionWeights:
    """Dense weights whose Q/K/V head blocks are replaced by the factor products.

    Quantized factors contribute ``s1^T Q(A~) Q(B~)`` (weight quantization only).
    """
    cfg = weights.config
    out = weights.copy()
    for (layer, role, head), f in factors.items():
        name = weight_name(layer, role)
        w = out.get(name)
        if isinstance(f, QuantizedFactors):
            block = f.pair.s1.T @ f.rotated_product()
        else:
            block = f.product()
        w[:, head * cfg.head_dim:(head + 1) * cfg.head_dim] = block
    return out


# pipeline


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    rho1: float = 0.6
    uniform_rank: bool = False
    ft_steps: int = FT_STEPS
    ft_lr: float = FT_LR
    quantize: bool = True
    qat_steps: int = QAT_STEPS
    qat_lr: float = QAT_LR
    wbits: int = 8
    abits: int = 8
    tile: int = 32
    n_samples: int = 64
    seq_len: int = 64
    seed: int = 0
    output_dir: str = "wsvd_out"
    jobs: int = 1

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.model.seed != self.seed:
            self.model = ModelConfig.from_dict({**self.model.to_dict(), "seed": self.seed})
        if self.ft_steps < 0 or self.qat_steps < 0:
            raise ConfigError("step counts must be nonnegative")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        TileConfig(self.tile)
        self.quant_spec()

    def quant_spec(self) -> QuantSpec:
        return QuantSpec(weight_bits=self.wbits, activation_bits=self.abits)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["schema"] = SCHEMA
        return d

    def portable_dict(self) -> dict:
        """``to_dict`` without the run location, so artifacts do not depend on where they are written."""
        d = self.to_dict()
        del d["output_dir"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        schema = d.pop("schema", SCHEMA)
        if schema != SCHEMA:
            raise ConfigError(f"unsupported config schema {schema!r}; expected {SCHEMA!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _mark(out: Path, stage: str) -> None:
    (out / "STAGE").write_text(stage + "\n")


def _summary(reports: dict) -> dict:
    init = sum(r["initial_loss"] for r in reports.values())
    final = sum(r["final_loss"] for r in reports.values())
    return {"initial_loss": init, "final_loss": final, "heads": len(reports),
            "improved_heads": sum(r["final_loss"] < r["initial_loss"] for r in reports.values())}


def run_pipeline(cfg: PipelineConfig, out_dir=None) -> dict:
    """Run all stages; returns the final report (also written to ``report.json``).

    Timings go to ``timing.json`` so ``report.json`` is byte-reproducible.
    """
    out = Path(out_dir or os.environ.get(OUTPUT_ENV) or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.dump_json(out / "config.json", cfg.portable_dict())
    timing = {}
    state: dict = {}
    mcfg = cfg.model

    def stage(name):
        def wrap(fn):
            _mark(out, name)
            t0 = time.perf_counter()
            try:
                fn()
            except Exception as exc:
                _mark(out, f"failed:{name}")
                raise StageFailure(name, exc) from exc
            timing[name] = time.perf_counter() - t0
            log.info("stage %s done in %.2fs", name, timing[name])
        return wrap

    calib = {"n_samples": cfg.n_samples, "seq_len": cfg.seq_len, "seed": cfg.seed}

    @stage("dense")
    def _():
        save_dense(out / "dense", init_weights(mcfg), {"calibration": calib})

    @stage("fisher")
    def _():
        weights = load_dense(out / "dense")
        batch = generate_calibration(mcfg, cfg.n_samples, cfg.seq_len)
        compute_fisher(weights, batch, out / "fisher", cfg.seed)

    @stage("compress")
    def _():
        weights = load_dense(out / "dense")
        factors, plan = stage_compress(weights, out / "fisher", cfg.rho1, cfg.uniform_rank)
        save_factored(out / "factored", weights, factors, plan, "factored", {"calibration": calib})

    @stage("finetune")
    def _():
        weights, factors, plan, _m = load_factored(out / "factored")
        tuned, reports = stage_finetune(weights, factors, out / "fisher", cfg.ft_steps, cfg.ft_lr, cfg.jobs)
        save_factored(out / "finetuned", weights, tuned, plan, "finetuned", {"calibration": calib})
        io.dump_json(out / "finetune_reports.json", reports)
        state["ft"] = reports

    if cfg.quantize:
        @stage("qat")
        def _():
            weights, factors, plan, _m = load_factored(out / "finetuned")
            qfactors, reports = stage_qat(weights, factors, out / "fisher", cfg.quant_spec(), cfg.qat_steps,
                                          cfg.qat_lr, cfg.jobs)
            save_quantized(out / "quantized", weights, qfactors, plan, {"calibration": calib})
            io.dump_json(out / "qat_reports.json", reports)
            state["qat"] = reports

    @stage("decode")
    def _():
        state["report"] = _final_report(cfg, out, state)

    _mark(out, "done")
    io.dump_json(out / "report.json", state["report"])
    io.dump_json(out / "timing.json", {"seconds": timing, "note": "CPU wall-clock, informational"})
    return state["report"]


def _final_report(cfg: PipelineConfig, out: Path, state: dict) -> dict:
    mcfg = cfg.model
    dense = load_dense(out / "dense")
    batch = generate_calibration(mcfg, cfg.n_samples, cfg.seq_len)
    stages = {"factored": load_factored(out / "factored"), "finetuned": load_factored(out / "finetuned")}
    if cfg.quantize:
        stages["quantized"] = load_quantized(out / "quantized")
    final_name = list(stages)[-1]
    _, final_factors, plan, _m = stages[final_name]

    fisher = {name: load_fisher(out / "fisher", name) for name in qkv_names(mcfg)}
    losses = {"dense": batch_loss(dense, batch)}
    weighted = {}
    for name, (_, factors, _, _) in stages.items():
        losses[name] = batch_loss(effective_weights(dense, factors), batch)
        if name != "quantized":
            weighted[name] = sum(
                weighted_loss(head_slice(dense.get(weight_name(l, ro)), hd, mcfg.head_dim),
                              fisher[weight_name(l, ro)].head(hd, mcfg.head_dim), f.a, f.b)
                for (l, ro, hd), f in factors.items()
            )

    # token-by-token decode of the final model against the dense forward pass
    model = build_per_head_model(dense, final_factors)
    x = batch.inputs[0]
    decoded = decode_sequence("fused", model, x, TileConfig(cfg.tile))
    dense_out, _ = forward(dense, x)

    # single-step traffic for the final model at L = seq_len
    bench = {}
    ranks_k = [plan.ranks[(0, "k", h)] for h in range(mcfg.n_heads)]
    shared_rank = max(1, round(sum(ranks_k) / len(ranks_k) * mcfg.embed_dim / mcfg.head_dim))
    for mode in ("fused", "flash_full", "shared_latent"):
        bc = BenchConfig(mode=mode, seq_len=cfg.seq_len, tile=cfg.tile, n_heads=mcfg.n_heads,
                         embed_dim=mcfg.embed_dim, head_dim=mcfg.head_dim,
                         rank=max(ranks_k), shared_rank=min(shared_rank, mcfg.embed_dim), seed=cfg.seed)
        if mode == "fused":
            single = build_per_head_model(_first_layer(dense), {k: f for k, f in final_factors.items() if k[0] == 0})
        elif mode == "shared_latent":
            single = build_shared_model(_first_layer(dense), bc.shared_rank)
        else:
            single = _first_layer(dense)
        rep = run_bench(bc, model=single, timing=False)
        rep.pop("wall_ms")
        bench[mode] = rep
    fused_loads = sum(bench["fused"]["per_head"][str(h)]["eta_measured"] for h in range(mcfg.n_heads))
    shared_loads = sum(bench["shared_latent"]["per_head"][str(h)]["eta_measured"] for h in range(mcfg.n_heads))

    report = {
        "schema": SCHEMA,
        "config": cfg.portable_dict(),
        "final_stage": final_name,
        "rank_plan": plan.to_dict(),
        "task_loss": losses,
        "weighted_loss": weighted,
        "finetune": _summary(state["ft"]) if "ft" in state else None,
        "qat": None,
        "decode": {
            "max_abs_error_vs_dense": float(np.max(np.abs(decoded - dense_out))),
            "bench": bench,
            "latent_load_ratio_fused_vs_shared": fused_loads / shared_loads,
        },
    }
    if "qat" in state:
        q = state["qat"]
        report["qat"] = {
            **_summary(q),
            "rtn_objective": sum(r["rtn_objective"] for r in q.values()),
            "max_orthogonality_error": max(r["max_orthogonality_error"] for r in q.values()),
        }
    return report


def _first_layer(weights: AttentionWeights) -> AttentionWeights:
    cfg = ModelConfig.from_dict({**weights.config.to_dict(), "n_layers": 1})
    return AttentionWeights(cfg, [weights.layers[0]])
