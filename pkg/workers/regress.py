"""
Ridge regression in the shared feature space, plus evaluation metrics.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from sklearn.model_selection import KFold

from workers.dataset import Dataset, Scaler, apply_scaler, fit_scaler

logger = logging.getLogger(__name__)

DEFAULT_RIDGE_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)


class RidgeError(Exception):
    """Base exception for regression operations"""
    pass


class SingularSystemError(RidgeError):
    """Normal equations singular with no ridge penalty"""
    pass


@dataclass
class RidgeModel:
    weights: np.ndarray
    intercept: float
    ridge_lambda: float

    @property
    def q(self) -> int:
        return self.weights.shape[0]

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "intercept": self.intercept, "ridge_lambda": self.ridge_lambda}

    @classmethod
    def from_dict(cls, data: dict) -> "RidgeModel":
        return cls(
            weights=np.asarray(data["weights"], dtype=float),
            intercept=float(data["intercept"]),
            ridge_lambda=float(data["ridge_lambda"]),
        )


def fit_ridge(Z: np.ndarray, y: np.ndarray, ridge_lambda: float) -> RidgeModel:
    """
    Minimize ||y - Z w - b||^2 + ridge_lambda ||w||^2 (intercept unpenalized).

    Centering absorbs the intercept; w solves the SPD system
    (Zc' Zc + ridge_lambda I) w = Zc' yc.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if Z.shape[0] != y.shape[0] or Z.shape[0] < 1:
        raise RidgeError(f"design {Z.shape} and response {y.shape} do not line up")
    if ridge_lambda < 0:
        raise RidgeError(f"ridge_lambda must be >= 0, got {ridge_lambda}")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(y))):
        raise RidgeError("ridge inputs contain non-finite values")

    z_mean = Z.mean(axis=0)
    y_mean = float(y.mean())
    Zc = Z - z_mean
    gram = Zc.T @ Zc + ridge_lambda * np.eye(Z.shape[1])

    if ridge_lambda == 0 and np.linalg.matrix_rank(gram) < Z.shape[1]:
        raise SingularSystemError("normal equations are singular; set ridge_lambda > 0")
    try:
        weights = linalg.solve(gram, Zc.T @ (y - y_mean), assume_a="pos")
    except linalg.LinAlgError as e:
        raise SingularSystemError(f"ridge solve failed ({e}); set ridge_lambda > 0") from e

    return RidgeModel(weights=weights, intercept=y_mean - float(z_mean @ weights), ridge_lambda=ridge_lambda)


def predict(model: RidgeModel, Z: np.ndarray) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[1] != model.q:
        raise RidgeError(f"model expects {model.q} features, got {Z.shape[1]}")
    return Z @ model.weights + model.intercept


def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Root mean squared error"""
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise RidgeError(f"prediction length {pred.shape[0]} != truth length {truth.shape[0]}")
    if pred.size == 0:
        raise RidgeError("rmse of an empty set")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def select_ridge_lambda(
    Z: np.ndarray,
    y: np.ndarray,
    grid: Sequence[float] = DEFAULT_RIDGE_GRID,
    folds: int = 5,
    seed: int = 0,
) -> float:
    """Pick the grid value with the lowest K-fold CV error on training data"""
    Z = np.atleast_2d(Z)
    y = np.asarray(y, dtype=float).ravel()
    folds = min(folds, Z.shape[0])
    if folds < 2:
        return float(min(grid))

    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    scores = []
    for value in grid:
        errors = []
        for fit_idx, val_idx in splitter.split(Z):
            model = fit_ridge(Z[fit_idx], y[fit_idx], value)
            errors.append(np.mean((predict(model, Z[val_idx]) - y[val_idx]) ** 2))
        scores.append(float(np.mean(errors)))

    best = float(grid[int(np.argmin(scores))])
    logger.info(f"Ridge sweep: best lambda={best} (cv mse {min(scores):.4f})")
    return best


def resolve_ridge_lambda(
    Z: np.ndarray,
    y: np.ndarray,
    ridge_lambda: float,
    grid: Optional[Sequence[float]] = None,
    seed: int = 0,
) -> float:
    """The fixed penalty, or the CV choice over grid when one is given"""
    if grid:
        return select_ridge_lambda(Z, y, grid, seed=seed)
    return ridge_lambda


def ridge_baseline(
    train: Dataset,
    test: Dataset,
    ridge_lambda: float,
    scaler: Optional[Scaler] = None,
    grid: Optional[Sequence[float]] = None,
    seed: int = 0,
) -> Tuple[np.ndarray, Optional[float], RidgeModel]:
    """
    Plain ridge on standardized raw features (the RR comparison arm).

    Returns:
        (test predictions in z-units, RMSE against z-scored truth or None, model)
    """
    scaler = scaler or fit_scaler(train)
    train_s = apply_scaler(scaler, train)
    test_s = apply_scaler(scaler, test)
    penalty = resolve_ridge_lambda(train_s.features, train_s.response, ridge_lambda, grid, seed)
    model = fit_ridge(train_s.features, train_s.response, penalty)
    pred = predict(model, test_s.features)
    score = rmse(pred, test_s.response) if test_s.response is not None else None
    return pred, score, model
