#!/usr/bin/env python3
"""
Automatic cross-domain transfer: command-line entry point.

Each pipeline stage runs on its own for debugging; `run` chains all of them.

Subcommands:
  mine      Mine latent domains; writes instance,domain CSV (and --trace)
  adapt     Mine + learn the affine map; writes the map as JSON
  fit       Full pipeline; writes the model bundle
  predict   Predict a target CSV with a saved bundle
  run       Full pipeline; writes bundle + predictions, reports RMSE
  bench     RR / TCA / ACDT table over the datasets of a YAML manifest
  sweep     Sensitivity of RMSE (q, tau, knn, beta) or mined m (a0, av, ai)
  synth     Planted latent-domain data as CSV
  project   2-D PCA or transferred coordinates for plotting

Usage:
    python scripts/acdt.py run --train data/forest.csv --response area --out results/forest
    python scripts/acdt.py bench --manifest config/bench_datasets.yaml --out results/bench
    python scripts/acdt.py sweep --param q=1,2,3 --param av=0.1,1,10 --out results/sweep
    python scripts/acdt.py synth --atoms "2,3;-2,-3" --sizes 100,100 --shift 0,1.5 --test-size 50 --out data/synth

Settings come from built-in defaults, then --config (flat key=value file),
then command-line flags. Exit codes: 0 success, 1 usage or configuration
error, 2 runtime failure.
"""

import os
import sys
import argparse
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

load_dotenv()

from db.bundle_store import load_bundle, save_bundle
from models.bundle import AffineMapRecord
from models.config import ConfigError, RunConfig, SynthSpec, build_run_config
from workers.adapt import fit_transfer
from workers.benchmark import DEFAULT_SWEEP_GRID, BenchmarkError, bench, load_manifest, sweep
from workers.dataset import CSV_FLOAT_FORMAT, apply_scaler, build_joint_stack, fit_scaler, inverse_response, load_csv
from workers.pipeline import (
    bundle_components,
    emit_projection,
    load_inputs,
    mine_domains,
    predict_with_bundle,
    run_pipeline,
    synth,
    write_trace,
)

# Configure logging
logging.basicConfig(
    level=os.getenv("ACDT_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = os.getenv("ACDT_OUT_DIR", "results")
DEFAULT_MANIFEST = str(Path(__file__).parent.parent / "config" / "bench_datasets.yaml")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

# (flag, type) pairs mirrored by config-file keys
RUN_FLAGS = [
    ("train", str), ("test", str), ("response", str),
    ("alpha", float), ("beta", float), ("mu", float), ("tau", float),
    ("q", int), ("knn", int), ("jitter", float),
    ("sweeps", int), ("burn-in", int), ("seed", int), ("n-chains", int), ("merge-floor", int),
    ("a0", float), ("b0", float), ("av", float), ("bv", float), ("ai", str), ("bi", str),
    ("ridge-lambda", float), ("ridge-grid", str),
    ("split", float), ("split-seed", int), ("repeats", int),
]


class UsageError(Exception):
    """Bad command-line usage"""
    pass


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def add_run_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration")
    for flag, kind in RUN_FLAGS:
        group.add_argument(f"--{flag}", type=kind, default=None)
    group.add_argument("--partition-rule", choices=["last-sweep", "modal"], default=None)
    group.add_argument("--mining", choices=["dp", "single"], default=None)
    group.add_argument("--config", type=str, default=None, help="Flat key=value settings file")
    group.add_argument("--trace", type=str, default=None, help="Per-sweep Gibbs trace CSV")


def build_parser() -> CliParser:
    parser = CliParser(description="Automatic cross-domain transfer for regression")
    parser.add_argument("--verbose", action="store_true", help="Debug logging (per-sweep trace)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    for name, help_text in [
        ("mine", "Mine latent domains"),
        ("adapt", "Mine latent domains and learn the affine map"),
        ("fit", "Fit the full pipeline and save a bundle"),
        ("run", "Fit, predict and report RMSE"),
    ]:
        cmd = sub.add_parser(name, help=help_text)
        add_run_flags(cmd)
        cmd.add_argument("--out", type=str, default=None)
        cmd.add_argument("--bundle", type=str, default=None)
        if name == "adapt":
            cmd.add_argument("--diagnostics", action="store_true", help="Also write S/L spectrum and distances")

    cmd = sub.add_parser("predict", help="Predict target data with a saved bundle")
    cmd.add_argument("--bundle", type=str, required=True)
    cmd.add_argument("--test", type=str, default=None)
    cmd.add_argument("--response", type=str, default=None)
    cmd.add_argument("--out", type=str, default=None)

    cmd = sub.add_parser("bench", help="Benchmark RR, TCA and ACDT")
    add_run_flags(cmd)
    cmd.add_argument("--manifest", type=str, default=DEFAULT_MANIFEST)
    cmd.add_argument("--out", type=str, default=None)

    cmd = sub.add_parser("sweep", help="Sensitivity sweep of single settings")
    add_run_flags(cmd)
    cmd.add_argument("--manifest", type=str, default=DEFAULT_MANIFEST)
    cmd.add_argument(
        "--param", action="append", default=None, help="name=v1,v2,... (repeatable; default: every sweepable setting)"
    )
    cmd.add_argument("--out", type=str, default=None)

    cmd = sub.add_parser("synth", help="Generate planted latent-domain data")
    cmd.add_argument("--atoms", type=str, default="2,3;-2,-3", help="Atoms separated by ';', intercept first")
    cmd.add_argument("--sizes", type=str, default="50,50")
    cmd.add_argument("--noise", type=float, default=0.1)
    cmd.add_argument("--shift", type=str, default="", help="Per-domain feature mean; ';' separates per-feature vectors")
    cmd.add_argument("--target-shift", type=str, default="", help="Per-feature offset of test instances")
    cmd.add_argument("--test-size", type=int, default=0)
    cmd.add_argument("--seed", type=int, default=0)
    cmd.add_argument("--response", type=str, default="y")
    cmd.add_argument("--out", type=str, default=None)

    cmd = sub.add_parser("project", help="Emit 2-D coordinates for plotting")
    cmd.add_argument("--bundle", type=str, required=True)
    cmd.add_argument("--mode", choices=["pca", "transferred"], default="pca")
    cmd.add_argument("--train", type=str, default=None)
    cmd.add_argument("--test", type=str, default=None)
    cmd.add_argument("--out", type=str, default=None)
    return parser


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse number list {text!r}") from e


def _shifts(text: str) -> List[Any]:
    """'0,1.5' gives one scalar per domain; '0,0;0,1.5' one vector per domain"""
    if not text:
        return []
    if ";" in text:
        return [_floats(part) for part in text.split(";") if part.strip()]
    return _floats(text)


def _sweep_grid(params: Optional[List[str]]) -> Dict[str, List[float]]:
    if not params:
        return dict(DEFAULT_SWEEP_GRID)
    grid = {}
    for item in params:
        name, sep, values = item.partition("=")
        if not sep or not name.strip():
            raise ConfigError(f"--param expects name=v1,v2,..., got {item!r}")
        grid[name.strip()] = _floats(values)
    return grid


def _check_file(path: Optional[str], what: str) -> None:
    if path and not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < --config file < command-line flags"""
    base = None
    if args.config:
        _check_file(args.config, "config file")
        base = build_run_config(dict(dotenv_values(args.config)))
        logger.info(f"Loaded settings from {args.config}")

    flat: Dict[str, Any] = {flag: getattr(args, flag.replace("-", "_")) for flag, _ in RUN_FLAGS}
    flat["partition-rule"] = args.partition_rule
    flat["mining"] = args.mining
    cfg = build_run_config(flat, base)
    _check_file(cfg.train, "training file")
    _check_file(cfg.test, "test file")
    return cfg


def _out(args: argparse.Namespace, default_name: str) -> str:
    return args.out or str(Path(DEFAULT_OUT_DIR) / default_name)


def _write_frame(frame: pd.DataFrame, path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote {len(frame)} rows to {path}")


def cmd_mine(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    train, _ = load_inputs(cfg)
    mined = mine_domains(apply_scaler(fit_scaler(train), train), cfg)
    if args.trace and mined.trace:
        write_trace(mined.trace, args.trace)
    frame = pd.DataFrame({"instance": np.arange(train.n), "domain": mined.partition})
    _write_frame(frame, _out(args, "partition.csv"))
    print(f"m={len(mined.sizes)} sizes={mined.sizes}")
    return EXIT_OK


def cmd_adapt(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    train, test = load_inputs(cfg)
    scaler = fit_scaler(train)
    mined = mine_domains(apply_scaler(scaler, train), cfg)
    if args.trace and mined.trace:
        write_trace(mined.trace, args.trace)
    stack = build_joint_stack(train, test, mined.partition, cfg.transfer.alpha, scaler)
    affine, eigvals, report = fit_transfer(stack, cfg.transfer, diagnostics=args.diagnostics)

    out = Path(_out(args, "affine_map.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(AffineMapRecord(**affine.to_dict()).model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote affine map (q={affine.q}) to {out}")

    if args.diagnostics:
        rows = [{"name": key, "value": value} for key, value in report.items()]
        rows += [{"name": f"eigval_{i + 1}", "value": float(v)} for i, v in enumerate(eigvals)]
        _write_frame(pd.DataFrame(rows), str(out.with_name(out.stem + "_diagnostics.csv")))
    return EXIT_OK


def _prediction_frame(pred: np.ndarray, raw: Optional[np.ndarray]) -> pd.DataFrame:
    frame = pd.DataFrame({"instance": np.arange(pred.shape[0]), "prediction": pred})
    if raw is not None:
        frame["prediction_raw"] = raw
    return frame


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    _, score, bundle = run_pipeline(cfg, trace_path=args.trace)
    save_bundle(bundle, args.bundle or _out(args, "bundle.json"))
    if score is not None:
        print(f"rmse={score:.6f}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    pred, score, bundle = run_pipeline(cfg, trace_path=args.trace)
    out_dir = Path(args.out or DEFAULT_OUT_DIR)
    save_bundle(bundle, args.bundle or str(out_dir / "bundle.json"))
    scaler, _, _ = bundle_components(bundle)
    _write_frame(_prediction_frame(pred, inverse_response(scaler, pred)), str(out_dir / "predictions.csv"))
    print(f"rmse={score:.6f}" if score is not None else "rmse=n/a (no target responses)")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    if args.test:
        _check_file(args.test, "test file")
        test = load_csv(args.test, args.response or bundle.config.response, role="test")
    else:
        _, test = load_inputs(bundle.config)
        if test is None:
            raise ConfigError("no --test given and the bundle's configuration has no target data")

    pred, score = predict_with_bundle(bundle, test)
    scaler, _, _ = bundle_components(bundle)
    _write_frame(_prediction_frame(pred, inverse_response(scaler, pred)), _out(args, "predictions.csv"))
    if score is not None:
        print(f"rmse={score:.6f}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    base = resolve_config(args)
    entries = load_manifest(args.manifest, base)
    table = bench(entries, args.out or str(Path(DEFAULT_OUT_DIR) / "bench"), repeats=base.repeats)
    print(table[["dataset", "method", "repeat", "rmse", "reference", "status"]].to_string(index=False))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    base = resolve_config(args)
    entries = load_manifest(args.manifest, base)
    try:
        tables = sweep(entries, _sweep_grid(args.param), args.out or str(Path(DEFAULT_OUT_DIR) / "sweep"))
    except BenchmarkError as e:
        raise ConfigError(str(e)) from e
    for table in tables.values():
        print(table.to_string(index=False))
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        atoms=[_floats(atom) for atom in args.atoms.split(";") if atom.strip()],
        sizes=[int(v) for v in _floats(args.sizes)],
        noise_std=args.noise,
        feature_shift=_shifts(args.shift),
        target_shift=_floats(args.target_shift) if args.target_shift else [],
        test_size=args.test_size,
        seed=args.seed,
    )
    paths = synth(spec, args.out or str(Path(DEFAULT_OUT_DIR) / "synth"), args.response)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_project(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    if args.train:
        _check_file(args.train, "training file")
        _check_file(args.test, "test file")
        train = load_csv(args.train, bundle.config.response, role="train")
        test = load_csv(args.test, bundle.config.response, role="test") if args.test else None
    else:
        train, test = load_inputs(bundle.config)
    emit_projection(bundle, train, test, args.mode, _out(args, f"projection_{args.mode}.csv"))
    return EXIT_OK


COMMANDS = {
    "mine": cmd_mine,
    "adapt": cmd_adapt,
    "fit": cmd_fit,
    "run": cmd_run,
    "predict": cmd_predict,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
    "project": cmd_project,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        logger.error(f"Usage error: {e}")
        return EXIT_CONFIG

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ValidationError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
