"""
Dataset ingestion and normalization for the transfer pipeline.

Loads header CSVs, z-scores features and responses with training
statistics, and stacks the joint (x, y-hat) representation consumed
by the adaptation solver.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

logger = logging.getLogger(__name__)

RESPONSE_ROW = "response"
CSV_FLOAT_FORMAT = "%.17g"


class DatasetError(Exception):
    """Base exception for dataset operations"""
    pass


class CellParseError(DatasetError):
    """A cell could not be read as a finite real"""

    def __init__(self, path: str, row: int, column: str, value: str):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"{path}: row {row}, column '{column}': cannot parse {value!r} as a finite real")


@dataclass
class Dataset:
    """Design matrix plus optional response"""
    features: np.ndarray
    names: List[str]
    response: Optional[np.ndarray] = None
    role: Literal["train", "test"] = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {self.features.shape}")
        n, p = self.features.shape
        # A target set may be empty; training data may not
        if p < 1 or (n < 1 and self.role == "train"):
            raise DatasetError(f"dataset needs n >= 1 and p >= 1, got {n}x{p}")
        if len(self.names) != p:
            raise DatasetError(f"{len(self.names)} names for {p} feature columns")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("features contain non-finite entries")
        if self.response is not None:
            self.response = np.asarray(self.response, dtype=float).ravel()
            if self.response.shape[0] != n:
                raise DatasetError(f"response length {self.response.shape[0]} != {n} rows")
            if not np.all(np.isfinite(self.response)):
                raise DatasetError("response contains non-finite entries")
        elif self.role == "train":
            raise DatasetError("training datasets require a response")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray, role: Optional[str] = None) -> "Dataset":
        return Dataset(
            features=self.features[index],
            names=list(self.names),
            response=None if self.response is None else self.response[index],
            role=role or self.role,
        )


@dataclass
class Scaler:
    """Training-set z-score statistics (population std)"""
    means: np.ndarray
    stds: np.ndarray
    names: List[str] = field(default_factory=list)
    response_mean: Optional[float] = None
    response_std: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "names": list(self.names),
            "response_mean": self.response_mean,
            "response_std": self.response_std,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scaler":
        return cls(
            means=np.asarray(data["means"], dtype=float),
            stds=np.asarray(data["stds"], dtype=float),
            names=list(data.get("names", [])),
            response_mean=data.get("response_mean"),
            response_std=data.get("response_std"),
        )


@dataclass
class JointStack:
    """Columns of D grouped by domain: latent domains 1..m, then the target"""
    D: np.ndarray
    domain_sizes: List[int]
    domain_of: np.ndarray
    column_index: np.ndarray
    n_train: int
    names: List[str] = field(default_factory=list)

    @property
    def n_latent(self) -> int:
        return len(self.domain_sizes) - (1 if self.D.shape[1] > self.n_train else 0)

    def train_columns(self) -> np.ndarray:
        """Training columns of D restored to input order"""
        block = self.D[:, : self.n_train]
        out = np.empty_like(block)
        out[:, self.column_index[: self.n_train]] = block
        return out

    def test_columns(self) -> np.ndarray:
        return self.D[:, self.n_train:]


def _parse_cell(text: str) -> float:
    # float() is the exact inverse of the '%.17g' writer
    try:
        return float(text.strip())
    except ValueError:
        return float("nan")


def load_csv(
    path: str,
    response_column: Optional[str] = None,
    role: Literal["train", "test"] = "train",
) -> Dataset:
    """
    Read a header CSV into a Dataset.

    Args:
        path: UTF-8 CSV with a header row and '.' decimals
        response_column: Name of the response column, or None
        role: 'test' tolerates a header without the response column

    Returns:
        Dataset with the non-response columns in header order
    """
    file_path = Path(path)
    if not file_path.exists():
        raise DatasetError(f"File not found: {path}")

    try:
        frame = pd.read_csv(file_path, dtype=str, keep_default_na=False, encoding="utf-8")
    except UnicodeDecodeError as e:
        raise DatasetError(f"{path}: not valid UTF-8 (byte {e.start})") from e
    columns = [str(c) for c in frame.columns]

    if response_column is not None and response_column not in columns:
        if role == "test":
            logger.info(f"{path}: no '{response_column}' column, loading as unlabeled test data")
            response_column = None
        else:
            raise DatasetError(f"{path}: response column '{response_column}' not in header {columns}")

    values = np.empty(frame.shape, dtype=float)
    for j, column in enumerate(columns):
        parsed = frame[column].map(_parse_cell).to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(parsed))
        if bad.size:
            # Header is line 1, so data row r sits on line r + 2
            row = int(bad[0])
            raise CellParseError(path, row + 2, column, frame[column].iloc[row])
        values[:, j] = parsed

    feature_names = [c for c in columns if c != response_column]
    feature_idx = [columns.index(c) for c in feature_names]
    response = values[:, columns.index(response_column)] if response_column else None

    dataset = Dataset(
        features=values[:, feature_idx],
        names=feature_names,
        response=response,
        role=role,
    )
    logger.info(f"Loaded {path}: n={dataset.n}, p={dataset.p}, response={'yes' if response is not None else 'no'}")
    return dataset


def write_csv(dataset: Dataset, path: str, response_column: str = "y") -> None:
    """Write a Dataset back to CSV; load_csv reproduces it bit-for-bit."""
    frame = pd.DataFrame(dataset.features, columns=dataset.names)
    if dataset.response is not None:
        frame[response_column] = dataset.response
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")


def split_dataset(dataset: Dataset, train_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded shuffle split; the test part keeps its response for evaluation."""
    if train_fraction >= 1.0:
        raise DatasetError("split fraction 1.0 leaves no test data; pass a test file instead")
    index = np.arange(dataset.n)
    train_idx, test_idx = train_test_split(index, train_size=train_fraction, random_state=seed, shuffle=True)
    return dataset.subset(np.sort(train_idx), "train"), dataset.subset(np.sort(test_idx), "test")


def _zscore_stats(values: np.ndarray, labels: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    means = values.mean(axis=0)
    stds = values.std(axis=0)
    constant = stds <= 0
    if np.any(constant):
        for name in np.asarray(labels, dtype=object)[constant]:
            logger.warning(f"Column '{name}' is constant; using std 1")
        stds = np.where(constant, 1.0, stds)
    return means, stds


def fit_scaler(train: Dataset) -> Scaler:
    """Fit z-score statistics on training data only"""
    means, stds = _zscore_stats(train.features, train.names)
    scaler = Scaler(means=means, stds=stds, names=list(train.names))
    if train.response is not None:
        r_mean, r_std = _zscore_stats(train.response[:, None], [RESPONSE_ROW])
        scaler.response_mean = float(r_mean[0])
        scaler.response_std = float(r_std[0])
    return scaler


def apply_scaler(scaler: Scaler, dataset: Dataset) -> Dataset:
    """Standardize features (and the response when both sides have one)"""
    if dataset.p != scaler.means.shape[0]:
        raise DatasetError(f"scaler fitted on {scaler.means.shape[0]} features, dataset has {dataset.p}")
    response = dataset.response
    if response is not None and scaler.response_mean is not None:
        response = (response - scaler.response_mean) / scaler.response_std
    return Dataset(
        features=(dataset.features - scaler.means) / scaler.stds,
        names=list(dataset.names),
        response=response,
        role=dataset.role,
    )


def inverse_response(scaler: Scaler, z: np.ndarray) -> np.ndarray:
    """Map z-scored responses back to original units"""
    if scaler.response_mean is None:
        raise DatasetError("scaler has no response statistics")
    return np.asarray(z, dtype=float) * scaler.response_std + scaler.response_mean


def build_yhat(train_y: np.ndarray, n_test: int, alpha: float) -> np.ndarray:
    """alpha * zscore(y) on training positions, exactly 0 on target positions"""
    if alpha < 0:
        raise DatasetError(f"alpha must be >= 0, got {alpha}")
    train_y = np.asarray(train_y, dtype=float).ravel()
    mean, std = _zscore_stats(train_y[:, None], [RESPONSE_ROW])
    yhat = np.zeros(train_y.shape[0] + n_test)
    yhat[: train_y.shape[0]] = alpha * (train_y - mean[0]) / std[0]
    return yhat


def build_joint_stack(
    train: Dataset,
    test: Optional[Dataset],
    partition: Sequence[int],
    alpha: float,
    scaler: Optional[Scaler] = None,
) -> JointStack:
    """
    Stack d_i = (standardized x_i, y-hat_i) as columns grouped by domain.

    Args:
        train: Raw training data (with response)
        test: Raw target data, or None for an empty target domain
        partition: Latent-domain label in 1..m for each training instance
        alpha: Shrink factor for the z-scored training response
        scaler: Training scaler; fitted on train when omitted

    Returns:
        JointStack with (p+1) rows; training columns ordered by domain
        (stable within a domain), target columns last
    """
    partition = np.asarray(partition, dtype=int).ravel()
    if partition.shape[0] != train.n:
        raise DatasetError(f"partition covers {partition.shape[0]} of {train.n} training instances")
    m = int(partition.max()) if partition.size else 0
    present = np.unique(partition)
    if partition.min() < 1 or not np.array_equal(present, np.arange(1, m + 1)):
        raise DatasetError(f"partition labels must cover exactly 1..m, got {present.tolist()}")
    if test is not None and test.p != train.p:
        raise DatasetError(f"train has {train.p} features, test has {test.p}")

    scaler = scaler or fit_scaler(train)
    x_train = apply_scaler(scaler, train).features
    n_test = 0 if test is None else test.n
    yhat = build_yhat(train.response, n_test, alpha)

    order = np.argsort(partition, kind="stable")
    blocks = [np.vstack([x_train.T, yhat[None, : train.n]])[:, order]]
    domain_of = [partition[order]]
    column_index = [order]
    sizes = np.bincount(partition, minlength=m + 1)[1:].tolist()

    if n_test:
        x_test = apply_scaler(scaler, test).features
        blocks.append(np.vstack([x_test.T, yhat[None, train.n:]]))
        domain_of.append(np.full(n_test, m + 1))
        column_index.append(np.arange(n_test))
        sizes.append(n_test)

    return JointStack(
        D=np.hstack(blocks),
        domain_sizes=[int(s) for s in sizes],
        domain_of=np.concatenate(domain_of),
        column_index=np.concatenate(column_index),
        n_train=train.n,
        names=list(train.names) + [RESPONSE_ROW],
    )
