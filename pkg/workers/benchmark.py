"""
Benchmark harness: plain ridge (RR), feature-only adaptation (TCA) and the
full transfer pipeline (ACDT) on the same split of each dataset, plus
sensitivity sweeps of single settings.

Datasets run concurrently; each run owns its generators and output files,
and the final table is merged in manifest order.
"""

import asyncio
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
import yaml

from db.bundle_store import save_bundle
from models.config import RunConfig, build_run_config, normalize_key, settings_digest
from workers.dataset import CSV_FLOAT_FORMAT, apply_scaler, fit_scaler
from workers.pipeline import load_inputs, mine_domains, run_pipeline, tca_predict
from workers.regress import ridge_baseline

logger = logging.getLogger(__name__)

METHODS = ("RR", "TCA", "ACDT")
RESULT_COLUMNS = ["dataset", "method", "repeat", "seed", "rmse", "reference", "status", "error", "settings_digest"]


class BenchmarkError(Exception):
    """Benchmark manifest could not be used"""
    pass


@dataclass
class BenchEntry:
    """One dataset of the benchmark manifest"""
    name: str
    config: RunConfig
    reference: Dict[str, float] = field(default_factory=dict)


def load_manifest(path: str, base: Optional[RunConfig] = None) -> List[BenchEntry]:
    """
    Read the YAML bench manifest.

    Layout:
        defaults: flat settings applied to every dataset
        datasets: list of {name, train, response, [test], [overrides], [reference]}
    """
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise BenchmarkError(f"Manifest not found: {path}")
    with open(manifest_path) as f:
        raw = yaml.safe_load(f) or {}

    datasets = raw.get("datasets") or []
    if not datasets:
        raise BenchmarkError(f"{path}: no datasets listed")
    defaults = build_run_config(raw.get("defaults") or {}, base)

    entries = []
    for item in datasets:
        if "name" not in item or "train" not in item:
            raise BenchmarkError(f"{path}: every dataset needs 'name' and 'train'")
        flat: Dict[str, Any] = {"train": item["train"], "test": item.get("test"), "response": item.get("response")}
        flat.update(item.get("overrides") or {})
        entries.append(
            BenchEntry(
                name=str(item["name"]),
                config=build_run_config(flat, defaults),
                reference={str(k): float(v) for k, v in (item.get("reference") or {}).items()},
            )
        )
    logger.info(f"Loaded bench manifest {path}: {len(entries)} datasets")
    return entries


def repeat_config(cfg: RunConfig, repeat: int) -> RunConfig:
    """Split and chain seeds advance together with the repeat index"""
    return cfg.model_copy(
        update={
            "split_seed": cfg.split_seed + repeat,
            "gibbs": cfg.gibbs.model_copy(update={"seed": cfg.gibbs.seed + repeat}),
        }
    )


class DatasetBenchmark:
    """Runs every method on every dataset and repeat"""

    def __init__(self, out_dir: str, repeats: int = 1, save_bundles: bool = True):
        self.out_dir = Path(out_dir)
        self.repeats = repeats
        self.save_bundles = save_bundles

    def _row(self, entry: BenchEntry, cfg: RunConfig, repeat: int, method: str) -> Dict[str, Any]:
        return {
            "dataset": entry.name,
            "method": method,
            "repeat": repeat,
            "seed": cfg.gibbs.seed,
            "rmse": float("nan"),
            "reference": entry.reference.get(method, float("nan")),
            "status": "ok",
            "error": "",
            "settings_digest": settings_digest(cfg),
        }

    def failed_rows(self, entry: BenchEntry, repeat: int, error: BaseException) -> List[Dict[str, Any]]:
        cfg = repeat_config(entry.config, repeat)
        rows = []
        for method in METHODS:
            row = self._row(entry, cfg, repeat, method)
            row.update(status="failed", error=f"{type(error).__name__}: {error}")
            rows.append(row)
        return rows

    def run_dataset(self, entry: BenchEntry, repeat: int = 0) -> List[Dict[str, Any]]:
        """All methods on one dataset and repeat; a failing method only fails its own row"""
        cfg = repeat_config(entry.config, repeat)
        start_time = datetime.now()
        train, test = load_inputs(cfg)
        if test is None or test.response is None:
            raise BenchmarkError(f"{entry.name}: bench needs target data with responses")

        def _acdt():
            _, score, bundle = run_pipeline(cfg, train, test)
            if self.save_bundles:
                save_bundle(bundle, str(self.out_dir / "bundles" / f"{entry.name}_r{repeat}.json"))
            return score

        arms = {
            "RR": lambda: ridge_baseline(train, test, cfg.ridge_lambda, grid=cfg.ridge_grid, seed=cfg.split_seed)[1],
            "TCA": lambda: tca_predict(train, test, cfg)[1],
            "ACDT": _acdt,
        }

        rows = []
        for method in METHODS:
            row = self._row(entry, cfg, repeat, method)
            try:
                row["rmse"] = arms[method]()
            except Exception as e:
                logger.error(f"{entry.name} {method} failed: {e}")
                row.update(status="failed", error=f"{type(e).__name__}: {e}")
            rows.append(row)

        elapsed = (datetime.now() - start_time).total_seconds()
        summary = ", ".join(f"{r['method']}={r['rmse']:.4f}" for r in rows if r["status"] == "ok")
        logger.info(f"{entry.name} (repeat {repeat}) completed in {elapsed:.1f}s: {summary}")
        return rows

    async def run_all(self, entries: List[BenchEntry]) -> pd.DataFrame:
        jobs = [(entry, repeat) for entry in entries for repeat in range(self.repeats)]
        tasks = [asyncio.to_thread(self.run_dataset, entry, repeat) for entry, repeat in jobs]
        results = await asyncio.gather(*tasks, return_exceptions=True)

        rows: List[Dict[str, Any]] = []
        for (entry, repeat), result in zip(jobs, results):
            if isinstance(result, BaseException):
                logger.error(f"Benchmark of {entry.name} failed: {result}")
                rows.extend(self.failed_rows(entry, repeat, result))
            else:
                rows.extend(result)
        return pd.DataFrame(rows, columns=RESULT_COLUMNS)

    def write(self, table: pd.DataFrame) -> Dict[str, Path]:
        """results.csv, plus summary.csv (mean, std, n per dataset and method) when repeats > 1"""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"results": self.out_dir / "results.csv"}
        table.to_csv(paths["results"], index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")

        if self.repeats > 1:
            ok = table[table["status"] == "ok"]
            summary = (
                ok.groupby(["dataset", "method"], sort=False)["rmse"]
                .agg(mean="mean", std="std", n="count")
                .reset_index()
            )
            paths["summary"] = self.out_dir / "summary.csv"
            summary.to_csv(paths["summary"], index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
        return paths


def bench(entries: List[BenchEntry], out_dir: str, repeats: int = 1, save_bundles: bool = True) -> pd.DataFrame:
    """Run the benchmark and write its tables; returns the results table"""
    start_time = datetime.now()
    runner = DatasetBenchmark(out_dir, repeats=repeats, save_bundles=save_bundles)
    table = asyncio.run(runner.run_all(entries))
    paths = runner.write(table)
    failed = int((table["status"] == "failed").sum())
    elapsed = (datetime.now() - start_time).total_seconds()
    logger.info(f"Benchmark completed in {elapsed:.1f}s: {len(table)} rows ({failed} failed) -> {paths['results']}")
    return table


SWEEP_RMSE_PARAMS = ("q", "tau", "knn", "beta")
SWEEP_DOMAIN_PARAMS = ("a0", "av", "ai")
SWEEP_FILES = {"rmse": "sweep_rmse.csv", "m": "sweep_domains.csv"}
DEFAULT_SWEEP_GRID: Dict[str, List[float]] = {
    "q": [1, 2, 3],
    "tau": [0.0, 1e-3, 1e-1, 1.0],
    "knn": [3, 5, 10],
    "beta": [0.1, 1.0, 10.0],
    "a0": [1.0, 10.0, 30.0, 100.0],
    "av": [0.1, 1.0, 10.0, 100.0],
    "ai": [1.0, 10.0, 30.0, 100.0],
}


class SensitivitySweep:
    """
    One setting varied over a value list on every dataset.

    Transfer settings (q, tau, knn, beta) are scored by pipeline RMSE;
    prior settings (a0, av, ai) by the number of mined latent domains.
    """

    def __init__(self, grid: Dict[str, Sequence[Any]]):
        self.grid: Dict[str, List[Any]] = {}
        for raw_key, values in grid.items():
            key = normalize_key(raw_key)
            if key not in SWEEP_RMSE_PARAMS + SWEEP_DOMAIN_PARAMS:
                raise BenchmarkError(
                    f"cannot sweep '{raw_key}'; choose from {', '.join(SWEEP_RMSE_PARAMS + SWEEP_DOMAIN_PARAMS)}"
                )
            if not values:
                raise BenchmarkError(f"no values given for '{raw_key}'")
            self.grid[key] = list(values)

    @staticmethod
    def metric_of(param: str) -> str:
        return "rmse" if param in SWEEP_RMSE_PARAMS else "m"

    def run_point(self, entry: BenchEntry, param: str, value: Any) -> float:
        cfg = build_run_config({param: value}, entry.config)
        train, test = load_inputs(cfg)
        if self.metric_of(param) == "m":
            scaler = fit_scaler(train)
            return float(len(mine_domains(apply_scaler(scaler, train), cfg).sizes))
        if test is None or test.response is None:
            raise BenchmarkError(f"{entry.name}: an RMSE sweep needs target data with responses")
        _, score, _ = run_pipeline(cfg, train, test)
        return float(score)

    async def run_all(self, entries: List[BenchEntry]) -> Dict[str, pd.DataFrame]:
        jobs = [(param, value, entry) for param, values in self.grid.items() for value in values for entry in entries]
        tasks = [asyncio.to_thread(self.run_point, entry, param, value) for param, value, entry in jobs]
        results = await asyncio.gather(*tasks, return_exceptions=True)

        rows: Dict[str, List[Dict[str, Any]]] = {"rmse": [], "m": []}
        for (param, value, entry), result in zip(jobs, results):
            metric = self.metric_of(param)
            row = {"param": param, "value": float(value), "dataset": entry.name, metric: float("nan"),
                   "status": "ok", "error": ""}
            if isinstance(result, BaseException):
                logger.error(f"Sweep {param}={value} on {entry.name} failed: {result}")
                row.update(status="failed", error=f"{type(result).__name__}: {result}")
            else:
                row[metric] = result
            rows[metric].append(row)

        return {
            metric: pd.DataFrame(metric_rows, columns=["param", "value", "dataset", metric, "status", "error"])
            for metric, metric_rows in rows.items()
            if metric_rows
        }


def sweep(entries: List[BenchEntry], grid: Dict[str, Sequence[Any]], out_dir: str) -> Dict[str, pd.DataFrame]:
    """
    Sensitivity sweep over the manifest datasets.

    Writes sweep_rmse.csv (param, value, dataset, rmse) for transfer
    settings and sweep_domains.csv (param, value, dataset, m) for prior
    settings; a failing point only fails its own row.
    """
    start_time = datetime.now()
    runner = SensitivitySweep(grid)
    tables = asyncio.run(runner.run_all(entries))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for metric, table in tables.items():
        path = out / SWEEP_FILES[metric]
        table.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
        logger.info(f"Wrote {len(table)} sweep rows to {path}")

    elapsed = (datetime.now() - start_time).total_seconds()
    logger.info(f"Sweep completed in {elapsed:.1f}s over {', '.join(runner.grid)}")
    return tables
