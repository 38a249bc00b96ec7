#!/usr/bin/env python3
"""
Download the six UCI regression datasets used by the benchmark and convert
each to a numeric CSV with a named response column.

Raw downloads are checksummed (sha256) into a lock file next to them; a
later fetch verifies against the lock and refuses mismatching content.

Datasets (output CSV -> response column):
  forest.csv    area        Forest Fires
  student.csv   G3          Student Performance (math course)
  slump.csv     slump       Concrete Slump Test
  stockTL.csv   ISE_TL      ISTANBUL STOCK EXCHANGE (TL-based index)
  stockUSD.csv  ISE_USD     ISTANBUL STOCK EXCHANGE (USD-based index)
  airfoil.csv   sound       Airfoil Self-Noise

Usage:
    python scripts/fetch_uci.py [--out data] [--only forest,student] [--force]
"""

import io
import sys
import json
import hashlib
import zipfile
import argparse
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import httpx
import pandas as pd

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from workers.dataset import CSV_FLOAT_FORMAT

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

UCI_BASE = "https://archive.ics.uci.edu/ml/machine-learning-databases"
LOCK_NAME = "uci.lock.json"
STOCK_COLUMNS = ["date", "ISE_TL", "ISE_USD", "SP", "DAX", "FTSE", "NIKKEI", "BOVESPA", "EU", "EM"]


class FetchError(Exception):
    """Download or conversion failed"""
    pass


def _numeric(frame: pd.DataFrame) -> pd.DataFrame:
    return frame.apply(pd.to_numeric, errors="coerce").dropna().reset_index(drop=True)


def convert_forest(raw: bytes) -> Dict[str, pd.DataFrame]:
    frame = pd.read_csv(io.BytesIO(raw)).drop(columns=["month", "day"])
    return {"forest": _numeric(frame)}


def convert_student(raw: bytes) -> Dict[str, pd.DataFrame]:
    with zipfile.ZipFile(io.BytesIO(raw)) as archive:
        frame = pd.read_csv(archive.open("student-mat.csv"), sep=";")
    return {"student": frame.select_dtypes(include="number").reset_index(drop=True)}


def convert_slump(raw: bytes) -> Dict[str, pd.DataFrame]:
    frame = pd.read_csv(io.BytesIO(raw))
    frame.columns = [c.strip() for c in frame.columns]
    # FLOW and 28-day strength are outputs too; keep only the seven mix inputs
    inputs = frame.iloc[:, 1:8]
    inputs.columns = ["cement", "slag", "fly_ash", "water", "sp", "coarse_aggr", "fine_aggr"]
    inputs = inputs.assign(slump=frame["SLUMP(cm)"])
    return {"slump": _numeric(inputs)}


def convert_stock(raw: bytes) -> Dict[str, pd.DataFrame]:
    frame = pd.read_excel(io.BytesIO(raw), header=None, skiprows=2, engine="openpyxl")
    frame = frame.iloc[:, : len(STOCK_COLUMNS)]
    frame.columns = STOCK_COLUMNS
    frame = _numeric(frame.drop(columns=["date"]))
    return {
        "stockTL": frame.drop(columns=["ISE_USD"]),
        "stockUSD": frame.drop(columns=["ISE_TL"]),
    }


def convert_airfoil(raw: bytes) -> Dict[str, pd.DataFrame]:
    names = ["frequency", "angle", "chord", "velocity", "thickness", "sound"]
    frame = pd.read_csv(io.BytesIO(raw), sep=r"\s+", header=None, names=names)
    return {"airfoil": _numeric(frame)}


SOURCES: Dict[str, Dict] = {
    "forest": {"url": f"{UCI_BASE}/forest-fires/forestfires.csv", "convert": convert_forest},
    "student": {"url": f"{UCI_BASE}/00320/student.zip", "convert": convert_student},
    "slump": {"url": f"{UCI_BASE}/concrete/slump/slump_test.data", "convert": convert_slump},
    "stock": {"url": f"{UCI_BASE}/00247/data_akbilgic.xlsx", "convert": convert_stock},
    "airfoil": {"url": f"{UCI_BASE}/00291/airfoil_self_noise.dat", "convert": convert_airfoil},
}


def sha256_of(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def load_lock(raw_dir: Path) -> Dict[str, str]:
    lock_path = raw_dir / LOCK_NAME
    if not lock_path.exists():
        return {}
    return json.loads(lock_path.read_text(encoding="utf-8"))


def save_lock(raw_dir: Path, lock: Dict[str, str]) -> None:
    (raw_dir / LOCK_NAME).write_text(json.dumps(lock, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def download(
    client: httpx.Client, url: str, target: Path, lock: Dict[str, str], force: bool = False
) -> bytes:
    """Cached or fresh raw bytes, checked against the lock before anything is written"""
    if target.exists() and not force:
        logger.info(f"Using cached {target}")
        data = target.read_bytes()
        verify(target.name, data, lock)
        return data
    logger.info(f"Downloading {url}")
    response = client.get(url)
    response.raise_for_status()
    verify(target.name, response.content, lock)
    target.write_bytes(response.content)
    return response.content


def verify(name: str, data: bytes, lock: Dict[str, str]) -> None:
    """Record the checksum on first fetch; reject content that differs later"""
    digest = sha256_of(data)
    expected = lock.get(name)
    if expected is None:
        lock[name] = digest
        logger.info(f"Recorded checksum for {name}: {digest}")
    elif expected != digest:
        raise FetchError(f"{name}: checksum {digest} does not match lock {expected}")


def fetch(out_dir: str, only: Optional[List[str]] = None, force: bool = False, timeout: float = 60.0) -> List[Path]:
    """Download, verify and convert the selected sources; returns written CSVs"""
    out = Path(out_dir)
    raw_dir = out / "raw"
    raw_dir.mkdir(parents=True, exist_ok=True)
    lock = load_lock(raw_dir)
    written = []

    with httpx.Client(timeout=timeout, follow_redirects=True) as client:
        for name, source in SOURCES.items():
            if only and name not in only:
                continue
            filename = source["url"].rsplit("/", 1)[-1]
            try:
                data = download(client, source["url"], raw_dir / filename, lock, force)
                convert: Callable[[bytes], Dict[str, pd.DataFrame]] = source["convert"]
                for dataset, frame in convert(data).items():
                    path = out / f"{dataset}.csv"
                    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
                    logger.info(f"Wrote {path}: {frame.shape[0]} rows, {frame.shape[1]} columns")
                    written.append(path)
            except (httpx.HTTPError, FetchError, ValueError, KeyError, zipfile.BadZipFile) as e:
                logger.error(f"Failed to fetch {name}: {e}")

    save_lock(raw_dir, lock)
    return written


if __name__ == "__main__":
    parser = argparse.ArgumentParser(
        description="Download and convert the UCI benchmark datasets"
    )
    parser.add_argument(
        "--out",
        type=str,
        default="data",
        help="Output directory for converted CSVs (default: data)"
    )
    parser.add_argument(
        "--only",
        type=str,
        default="",
        help=f"Comma-separated subset of {','.join(SOURCES)}"
    )
    parser.add_argument(
        "--force",
        action="store_true",
        help="Re-download even when a cached copy exists"
    )

    args = parser.parse_args()
    selected = [s.strip() for s in args.only.split(",") if s.strip()] or None
    paths = fetch(args.out, selected, args.force)
    sys.exit(0 if paths else 2)
