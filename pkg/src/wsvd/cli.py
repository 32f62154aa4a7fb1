"""Command-line entry point: ``wsvd <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
The output directory of ``pipeline`` can be overridden with ``WSVD_OUTPUT_DIR``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io, pipeline
from .costmodel import ablation_table, format_table
from .decode import MODES, BenchConfig, run_bench
from .errors import ConfigError, NumericalError
from .factorize import FT_LR, FT_STEPS
from .model import ModelConfig, generate_calibration, init_weights
from .quant import QAT_LR, QAT_STEPS, QuantSpec

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("wsvd")


class _DefaultsHelp(argparse.RawDescriptionHelpFormatter):
    """Show every non-trivial default, including options without help text."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default not in (None, False, argparse.SUPPRESS) and "%(default)" not in text:
            text = f"{text} (default: %(default)s)".strip()
        return text


def _fmt():
    return {"formatter_class": _DefaultsHelp}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wsvd", description="Per-head low-rank KV compression toolkit.", **_fmt())
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="write a seeded dense checkpoint", **_fmt())
    s.add_argument("--out", required=True, help="checkpoint directory to create")
    s.add_argument("--E", type=int, default=128, help="embedding dimension")
    s.add_argument("--H", type=int, default=32, help="head dimension")
    s.add_argument("--heads", type=int, default=4, help="number of attention heads")
    s.add_argument("--layers", type=int, default=2, help="number of layers")
    s.add_argument("--outlier-channels", type=int, nargs="*", default=[], help="input channels scaled up in calibration data")
    s.add_argument("--seed", type=int, default=0, help="seed for weights and calibration data")

    s = sub.add_parser("fisher", help="compute plain and rotated Fisher scores for Q/K/V", **_fmt())
    s.add_argument("--in", dest="src", required=True, help="dense checkpoint directory")
    s.add_argument("--out", required=True, help="Fisher output directory")
    s.add_argument("--samples", type=int, default=64, help="calibration sequences")
    s.add_argument("--seq-len", type=int, default=64, help="tokens per calibration sequence")
    s.add_argument("--seed", type=int, default=0, help="calibration data seed")

    s = sub.add_parser("compress", help="per-head SVD with Fisher-guided rank allocation", **_fmt())
    s.add_argument("--in", dest="src", required=True, help="dense checkpoint directory")
    s.add_argument("--out", required=True, help="output checkpoint directory")
    s.add_argument("--fisher", required=True, help="Fisher directory")
    s.add_argument("--rho1", type=float, default=0.6, help="target parameter ratio")
    s.add_argument("--uniform-rank", action="store_true", help="same rank for every head")

    s = sub.add_parser("finetune", help="Fisher-weighted fine-tuning of the factors", **_fmt())
    s.add_argument("--in", dest="src", required=True, help="factored checkpoint directory")
    s.add_argument("--out", required=True, help="output checkpoint directory")
    s.add_argument("--fisher", required=True, help="Fisher directory")
    s.add_argument("--steps", type=int, default=FT_STEPS, help="Adam steps per head")
    s.add_argument("--lr", type=float, default=FT_LR, help="learning rate")
    s.add_argument("--jobs", type=int, default=1, help="worker threads across heads")
    s.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the stage draws no randomness")

    s = sub.add_parser("qat", help="Hadamard/Cayley rotations plus local QAT", **_fmt())
    s.add_argument("--in", dest="src", required=True, help="fine-tuned checkpoint directory")
    s.add_argument("--out", required=True, help="output checkpoint directory")
    s.add_argument("--fisher", required=True, help="Fisher directory")
    s.add_argument("--wbits", type=int, default=8, choices=(4, 8), help="weight bits")
    s.add_argument("--abits", type=int, default=8, choices=(4, 8), help="activation bits")
    s.add_argument("--steps", type=int, default=QAT_STEPS, help="QAT steps per head")
    s.add_argument("--lr", type=float, default=QAT_LR, help="learning rate")
    s.add_argument("--jobs", type=int, default=1, help="worker threads across heads")
    s.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the stage draws no randomness")

    s = sub.add_parser("decode-bench", help="one decode step with traffic counters", **_fmt())
    s.add_argument("--mode", choices=MODES, default="fused", help="decoding mode")
    s.add_argument("--L", type=int, default=256, help="cache length")
    s.add_argument("--tile", type=int, default=32, help="rows per tile")
    s.add_argument("--heads", type=int, default=4, help="number of heads")
    s.add_argument("--E", type=int, default=128, help="embedding dimension")
    s.add_argument("--H", type=int, default=32, help="head dimension")
    s.add_argument("--r", type=int, default=8, help="per-head rank")
    s.add_argument("--R", type=int, default=32, help="shared-latent rank")
    s.add_argument("--seed", type=int, default=0, help="model and token seed")
    s.add_argument("--batch", type=int, default=1, help="multiplier applied to reported counters")
    s.add_argument("--materialize", action="store_true", help="write back and reload reconstructed keys")
    s.add_argument("--report", help="write the JSON report here (default: stdout)")

    s = sub.add_parser("report", help="closed-form cost tables", **_fmt())
    s.add_argument("--analytic", action="store_true", required=True, help="closed-form sweep over L and rho2")
    s.add_argument("--E", type=int, default=4096, help="embedding dimension")
    s.add_argument("--H", type=int, default=128, help="head dimension")
    s.add_argument("--format", choices=("tsv", "csv", "json"), default="tsv", help="output format")
    s.add_argument("--out", help="write here instead of stdout")

    defaults = json.dumps(pipeline.PipelineConfig().to_dict(), indent=2, sort_keys=True)
    s = sub.add_parser("pipeline", help="run every stage from a JSON config",
                       epilog="default config (any subset of keys may be given):\n" + defaults, **_fmt())
    s.add_argument("--config", help="PipelineConfig JSON; defaults are used when omitted")
    s.add_argument("--out", help=f"output directory (overrides config; {pipeline.OUTPUT_ENV} overrides both)")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--jobs", type=int, help="cap worker threads")
    s.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    return p


def _cmd_init(a) -> int:
    cfg = ModelConfig(embed_dim=a.E, head_dim=a.H, n_heads=a.heads, n_layers=a.layers, seed=a.seed,
                      outlier_channels=tuple(a.outlier_channels))
    pipeline.save_dense(a.out, init_weights(cfg))
    print(a.out)
    return EXIT_OK


def _cmd_fisher(a) -> int:
    weights = pipeline.load_dense(a.src)
    batch = generate_calibration(weights.config, a.samples, a.seq_len, seed=a.seed)
    pipeline.compute_fisher(weights, batch, a.out, a.seed)
    print(a.out)
    return EXIT_OK


def _cmd_compress(a) -> int:
    weights = pipeline.load_dense(a.src)
    factors, plan = pipeline.stage_compress(weights, a.fisher, a.rho1, a.uniform_rank)
    pipeline.save_factored(a.out, weights, factors, plan, "factored")
    print(json.dumps({"rho1": plan.rho1, "rho2": plan.rho2}))
    return EXIT_OK


def _cmd_finetune(a) -> int:
    weights, factors, plan, _ = pipeline.load_factored(a.src)
    tuned, reports = pipeline.stage_finetune(weights, factors, a.fisher, a.steps, a.lr, a.jobs)
    pipeline.save_factored(a.out, weights, tuned, plan, "finetuned")
    io.dump_json(Path(a.out) / "finetune_reports.json", reports)
    print(json.dumps(pipeline._summary(reports)))
    return EXIT_OK


def _cmd_qat(a) -> int:
    weights, factors, plan, _ = pipeline.load_factored(a.src)
    spec = QuantSpec(weight_bits=a.wbits, activation_bits=a.abits)
    qf, reports = pipeline.stage_qat(weights, factors, a.fisher, spec, a.steps, a.lr, a.jobs)
    pipeline.save_quantized(a.out, weights, qf, plan)
    io.dump_json(Path(a.out) / "qat_reports.json", reports)
    print(json.dumps(pipeline._summary(reports)))
    return EXIT_OK


def _cmd_decode_bench(a) -> int:
    cfg = BenchConfig(mode=a.mode, seq_len=a.L, tile=a.tile, n_heads=a.heads, embed_dim=a.E, head_dim=a.H,
                      rank=a.r, shared_rank=a.R, seed=a.seed, batch=a.batch, materialize=a.materialize)
    report = run_bench(cfg)
    if a.report:
        io.dump_json(a.report, report)
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if report["match"] else EXIT_NUMERIC


def _cmd_report(a) -> int:
    rows = ablation_table(E=a.E, H=a.H)
    if a.format == "tsv":
        text = format_table(rows) + "\n"
    elif a.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        import io as _stdio
        buf = _stdio.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
    if a.out:
        Path(a.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_pipeline(a) -> int:
    cfg = pipeline.PipelineConfig.load(a.config) if a.config else pipeline.PipelineConfig()
    d = cfg.to_dict()
    if a.seed is not None:
        d["seed"] = a.seed
        d["model"]["seed"] = a.seed
    if a.jobs is not None:
        d["jobs"] = a.jobs
    if a.out:
        d["output_dir"] = a.out
    cfg = pipeline.PipelineConfig.from_dict(d)
    if a.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    out = os.environ.get(pipeline.OUTPUT_ENV) or cfg.output_dir
    report = pipeline.run_pipeline(cfg, out)
    print(json.dumps({"output_dir": str(out), "task_loss": report["task_loss"]}, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "init": _cmd_init, "fisher": _cmd_fisher, "compress": _cmd_compress, "finetune": _cmd_finetune,
    "qat": _cmd_qat, "decode-bench": _cmd_decode_bench, "report": _cmd_report, "pipeline": _cmd_pipeline,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, pipeline.StageFailure):
        exc = exc.cause
    if isinstance(exc, (OSError, io.FormatError)):
        return EXIT_IO
    if isinstance(exc, (NumericalError, np.linalg.LinAlgError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, ValueError, KeyError, TypeError)):
        return EXIT_CONFIG
    raise exc


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a)
    except Exception as exc:  # mapped to documented exit codes
        code = exit_code(exc)
        print(f"wsvd {a.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
