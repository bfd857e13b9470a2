"""Command-line front end: calibrate, quantize, compare, eval.

Exit codes:
  0  success
  2  bad configuration (unknown or malformed config key; argparse usage)
  3  incompatible flag combination
  4  corrupted input file (CRC or structure)
  5  unsupported file format version

The seed comes from --seed when given, else the TAQ_SEED environment
variable, else 0.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from . import fileio
from .metrics import write_mse_csv, write_occupancy_csv, write_ranges_csv
from .pipeline import (MIGRATION_MODES, SHIFT_MODES, PipelineConfig,
                       compare_static_dynamic, evaluate_model,
                       post_gelu_occupancy, quantize_model)
from .reconstruction import write_trace_csv
from .toydit import generate_calibration

CONFIG_KEYS = {"d": 64, "tokens": 64, "blocks": 2, "timesteps": 25,
               "per_step": 32, "seed": 0}

EXIT_BAD_CONFIG = 2
EXIT_INCOMPATIBLE = 3
EXIT_CORRUPT = 4
EXIT_VERSION = 5


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("TAQ_SEED")
    return int(env) if env else 0


def _read_config(path: str | None) -> tuple[dict, set]:
    cfg = dict(CONFIG_KEYS)
    explicit: set[str] = set()
    if path is None:
        return cfg, explicit
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            print(f"config error: line {lineno} is not key=value: {raw!r}",
                  file=sys.stderr)
            sys.exit(EXIT_BAD_CONFIG)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            print(f"config error: unknown key {key!r}", file=sys.stderr)
            sys.exit(EXIT_BAD_CONFIG)
        try:
            cfg[key] = int(value)
        except ValueError:
            print(f"config error: key {key!r} needs an integer, got {value!r}",
                  file=sys.stderr)
            sys.exit(EXIT_BAD_CONFIG)
        explicit.add(key)
    return cfg, explicit


def _load_calibration(path: str):
    try:
        return fileio.load_calibration(path)
    except fileio.VersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(EXIT_VERSION)
    except (fileio.IntegrityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(EXIT_CORRUPT)


def _load_model(path: str):
    try:
        return fileio.load_model(path)
    except fileio.VersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(EXIT_VERSION)
    except (fileio.IntegrityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(EXIT_CORRUPT)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    cfg, explicit = _read_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    elif "seed" not in explicit:
        cfg["seed"] = _resolve_seed(None)
    calib = generate_calibration(cfg["timesteps"], cfg["per_step"], cfg["d"],
                                 cfg["tokens"], cfg["seed"])
    fileio.save_calibration(calib, args.out)
    stacked = calib.stacked()
    ids = calib.step_ids()
    print(f"wrote {args.out}: {len(calib)} samples "
          f"({cfg['timesteps']} steps x {cfg['per_step']}), "
          f"d={cfg['d']} tokens={cfg['tokens']} seed={cfg['seed']} "
          f"(model blocks hint: {cfg['blocks']})")
    print("per-step input ranges:")
    for step in range(cfg["timesteps"]):
        x = stacked[ids == step]
        print(f"  step {step:3d}: min {x.min():9.4f}  max {x.max():9.4f}")
    return 0


def cmd_quantize(args) -> int:
    seed = _resolve_seed(args.seed)
    try:
        pcfg = PipelineConfig(bits_w=args.bits_w, bits_a=args.bits_a,
                              mode=args.mode, shift=args.shift,
                              migration=args.migration, topk=args.topk,
                              iterations=args.iters, seed=seed,
                              blocks=args.blocks)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    calib = _load_calibration(args.calib)
    t0 = time.perf_counter()
    model, traces = quantize_model(calib, pcfg)
    build_s = time.perf_counter() - t0
    fileio.save_model(model, args.out)

    report_dir = Path(args.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    if traces:
        write_trace_csv(traces, report_dir / "traces.csv")
    ev = evaluate_model(model, calib)
    write_mse_csv([(f"block{i}", mse) for i, mse in enumerate(ev["block_mse"])],
                  report_dir / "mse.csv")
    occ_rows, range_rows = _model_reports(model, calib)
    write_occupancy_csv(occ_rows, report_dir / "occupancy.csv")
    write_ranges_csv(range_rows, report_dir / "ranges.csv")

    print(f"wrote {args.out} (W{args.bits_w}A{args.bits_a}, mode={args.mode}, "
          f"shift={args.shift}, migration={args.migration}, seed={seed})")
    print(f"reconstruction: {len(traces)} units in {build_s:.1f}s")
    for i, mse in enumerate(ev["block_mse"]):
        print(f"  block {i} output MSE vs full precision: {mse:.6e}")
    print(f"reports in {report_dir}/")
    return 0


def _model_reports(model, calib):
    occ_rows, range_rows = [], []
    for bi in range(len(model.layers)):
        reports = post_gelu_occupancy(model, calib, bi)
        occ_rows.append((f"block{bi}/post_gelu_raw", reports["raw"]))
        occ_rows.append((f"block{bi}/post_gelu_transformed", reports["transformed"]))
        range_rows.append((f"block{bi}/post_gelu_raw",
                           reports["raw"].channel_ranges))
        range_rows.append((f"block{bi}/post_gelu_transformed",
                           reports["transformed"].channel_ranges))
    return occ_rows, range_rows


def cmd_compare(args) -> int:
    seed = _resolve_seed(args.seed)
    calib = _load_calibration(args.calib)
    pcfg = PipelineConfig(bits_w=args.bits_w, bits_a=args.bits_a,
                          topk=args.topk, seed=seed, blocks=args.blocks)
    res = compare_static_dynamic(calib, pcfg)
    print(f"{'pipeline':>10s} {'block-output MSE':>18s} {'eval runtime':>13s} "
          f"{'shift recomputations':>21s}")
    for label in ("static", "dynamic"):
        r = res[label]
        print(f"{label:>10s} {r['final_mse']:>18.6e} {r['runtime_s']:>12.3f}s "
              f"{r['shift_recomputations']:>21d}")
    print(f"static/dynamic MSE ratio: {res['mse_ratio']:.4f}")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    calib = _load_calibration(args.calib)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ev = evaluate_model(model, calib)
    write_mse_csv([(f"block{i}", mse) for i, mse in enumerate(ev["block_mse"])],
                  out_dir / "mse.csv")
    occ_rows, range_rows = _model_reports(model, calib)
    write_occupancy_csv(occ_rows, out_dir / "occupancy.csv")
    write_ranges_csv(range_rows, out_dir / "ranges.csv")
    print(f"model: {args.model} (W{model.bits_w}A{model.bits_a}, "
          f"shift={model.shift_mode}, migration={model.migration_mode}, "
          f"{len(model.layers)} blocks)")
    for i, mse in enumerate(ev["block_mse"]):
        print(f"  block {i} output MSE vs full precision: {mse:.6e}")
    print(f"shift recomputations during eval: {ev['shift_recomputations']}")
    print(f"reports in {out_dir}/")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taqkit",
        description="Desk-scale post-training quantization for a toy "
                    "DiT-style model: calibration, transforms, "
                    "reconstruction, and comparison harnesses.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="generate a calibration file")
    p.add_argument("--config", help="key=value file (keys: d, tokens, blocks, "
                                    "timesteps, per_step, seed)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed (or TAQ_SEED)")
    p.add_argument("--out", default="calib.taqc", help="output TAQC file")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", help="quantize the toy model")
    p.add_argument("--calib", required=True, help="TAQC calibration file")
    p.add_argument("--bits-w", type=int, default=4)
    p.add_argument("--bits-a", type=int, default=8)
    p.add_argument("--mode", choices=("separate", "joint"), default="joint")
    p.add_argument("--shift", choices=SHIFT_MODES, default="momentum")
    p.add_argument("--migration", choices=MIGRATION_MODES, default="migrate")
    p.add_argument("--topk", type=int, default=None,
                   help="outlier channel count (default: 1%% of channels)")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--out", default="model.taqm", help="output TAQM file")
    p.add_argument("--report-dir", default="reports")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("compare", help="static momentum vs dynamic shifting")
    p.add_argument("--calib", required=True)
    p.add_argument("--bits-w", type=int, default=4)
    p.add_argument("--bits-a", type=int, default=8)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--blocks", type=int, default=1)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("eval", help="replay a model file over a calibration")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out-dir", default="eval_reports")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
