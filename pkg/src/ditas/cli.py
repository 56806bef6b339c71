"""Command-line entry points: ``gen-traces``, ``quantize``, ``eval``, ``show-config``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import artifacts
from .config import ConfigError, RunConfig, load_config
from .pipeline import EvalReport, ablation_verdict, evaluate_variants, quantize_variants, trace_fingerprint
from .search import LayerError
from .tensorfile import TensorFileError

log = logging.getLogger("ditas")


def _config(path) -> RunConfig:
    return RunConfig() if path is None else load_config(path)


def cmd_show_config(args) -> int:
    sys.stdout.write(_config(args.config).dump())
    return 0


def cmd_gen_traces(args) -> int:
    cfg = _config(args.config)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise artifacts.ArtifactError(f"{out}: cannot create output directory ({exc.strerror})") from None
    records = artifacts.write_traces(cfg, out)
    log.info("wrote %d records to %s", len(records), out)
    return 0


def cmd_quantize(args) -> int:
    cfg = _config(args.config)
    if args.alpha is not None:
        if not 0.0 <= args.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]", "alpha", "--alpha")
        cfg = replace(cfg, alpha=args.alpha)
    trace_cfg, model, traces, _, rows = artifacts.load_traces(args.traces)
    if trace_cfg.layers != cfg.layers:
        raise ConfigError(
            f"layers {cfg.layers!r} do not match the traces in {args.traces}", "layers", args.config or "<defaults>"
        )
    comp = None if args.no_compensation else cfg.compensation_config()
    variants = quantize_variants(model, traces, cfg.grid_config(), comp, cfg.alpha, args.workers)
    notes = []
    if comp is None:
        notes.append("compensation variant disabled")
    if cfg.alpha is not None:
        notes.append(f"grid search bypassed, alpha fixed at {cfg.alpha!r}")
    artifacts.write_quantized(args.out, variants, cfg, rows, notes)
    return 0


def cmd_eval(args) -> int:
    info = artifacts.read_model_manifest(args.model)
    missing = artifacts.missing_model_files(args.model)
    if missing:
        raise artifacts.ArtifactError("missing artifacts:\n  " + "\n  ".join(missing))
    _, model, traces, heldout, rows = artifacts.load_traces(args.traces, heldout=True)
    for row in rows:
        key = (row["kind"], row["name"])
        if key in info["sources"] and info["sources"][key] != row["fnv1a64"]:
            raise artifacts.ArtifactError(
                f"{args.model}: field source {row['kind']} {row['name']} was quantized from fingerprint "
                f"{info['sources'][key]}, traces have {row['fnv1a64']}"
            )
    variants, _ = artifacts.load_quantized(args.model)
    calib_fps = tuple(trace_fingerprint(t.x) for t in traces)
    held_fp = trace_fingerprint(heldout)
    if held_fp in calib_fps:
        raise artifacts.ArtifactError(f"{args.traces}: held-out inputs coincide with a calibration trace")
    end_to_end, per_layer = evaluate_variants(variants, model, heldout, args.workers)
    report = EvalReport(
        weight_bits=int(info["weight_bits"]),
        act_bits=int(info["act_bits"]),
        end_to_end=end_to_end,
        layers=per_layer,
        calibration_fingerprints=calib_fps,
        heldout_fingerprint=held_fp,
        verdict=ablation_verdict(end_to_end),
        notes=tuple(info["notes"]),
    )
    text = artifacts.format_report(report, absent=info["absent"])
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    artifacts.atomic_write_text(report_path, text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ditas", description="Post-training W/A quantization of toy diffusion linear chains.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("show-config", help="print the resolved configuration")
    p.add_argument("--config")
    p.set_defaults(func=cmd_show_config)

    p = sub.add_parser("gen-traces", help="synthesize weights and activation traces")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_traces)

    p = sub.add_parser("quantize", help="smooth, search, quantize and compensate every layer")
    p.add_argument("--config")
    p.add_argument("--traces", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, help="fixed migration exponent instead of grid search")
    p.add_argument("--no-compensation", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="score quantized variants on held-out inputs")
    p.add_argument("--model", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, artifacts.ArtifactError, TensorFileError, LayerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
