"""
End-to-end automatic cross-domain transfer.

Stages: load -> scale -> mine latent domains -> learn the affine map ->
ridge on transformed training columns -> predict the target columns.
Every failure is re-raised as PipelineError naming its stage.
"""

import logging
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from models.bundle import AffineMapRecord, ModelBundle, PartitionSummary, RidgeRecord, ScalerRecord
from models.config import MiningMode, RunConfig, SynthSpec
from workers.adapt import AffineMap, fit_transfer, tca_baseline, transform
from workers.dataset import (
    CSV_FLOAT_FORMAT,
    Dataset,
    Scaler,
    apply_scaler,
    build_joint_stack,
    fit_scaler,
    load_csv,
    split_dataset,
    write_csv,
)
from workers.dp_miner import atom_posterior, design_matrix, merge_small_clusters, run_chains
from workers.projection_worker import ProjectionMode, ProjectionWorker, domain_labels, projection_frame
from workers.regress import RidgeModel, fit_ridge, predict, resolve_ridge_lambda, rmse
from workers.stochastics import make_rng

logger = logging.getLogger(__name__)


class PipelineError(Exception):
    """A pipeline stage failed"""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


@dataclass
class MinedDomains:
    """Latent-domain partition of the training set"""
    partition: np.ndarray  # labels 1..m, input order
    atoms: np.ndarray
    trace: List[Dict[str, float]]

    @property
    def sizes(self) -> List[int]:
        return np.bincount(self.partition)[1:].tolist()


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError(name, f"{type(e).__name__}: {e}") from e


def load_inputs(cfg: RunConfig) -> Tuple[Dataset, Optional[Dataset]]:
    """
    Training set plus the target set.

    The target comes from cfg.test when given, otherwise from a seeded
    split of the training file (split < 1). None means an empty target.
    """
    if not cfg.train:
        raise PipelineError("load", "no training file configured")

    def _load():
        train = load_csv(cfg.train, cfg.response, role="train")
        if cfg.test:
            test = load_csv(cfg.test, cfg.response, role="test")
        elif cfg.split < 1.0:
            train, test = split_dataset(train, cfg.split, cfg.split_seed)
        else:
            test = None
        if test is not None and test.n == 0:
            logger.warning("Target set is empty; no RMSE will be reported")
            test = None
        if train.n < 2:
            raise ValueError(f"training set needs at least 2 instances, got {train.n}")
        return train, test

    return _stage("load", _load)


def mine_domains(train_s: Dataset, cfg: RunConfig) -> MinedDomains:
    """Partition standardized training data into latent domains"""
    X = design_matrix(train_s.features)
    Y = train_s.response

    if cfg.mining == MiningMode.SINGLE:
        atom, _ = atom_posterior(X, Y, np.ones(X.shape[1]))
        logger.info(f"Single latent domain forced for {train_s.n} instances")
        return MinedDomains(partition=np.ones(train_s.n, dtype=int), atoms=atom[None, :], trace=[])

    result = run_chains(X, Y, cfg.hyper, cfg.gibbs)
    partition, atoms = result.partition, result.atoms
    if cfg.gibbs.merge_floor >= 2:
        partition, atoms = merge_small_clusters(partition, atoms, cfg.gibbs.merge_floor)
    return MinedDomains(partition=partition, atoms=atoms, trace=result.trace)


def bundle_components(bundle: ModelBundle) -> Tuple[Scaler, AffineMap, RidgeModel]:
    return (
        Scaler.from_dict(bundle.scaler.model_dump()),
        AffineMap.from_dict(bundle.affine_map.model_dump()),
        RidgeModel.from_dict(bundle.ridge.model_dump()),
    )


def target_columns(scaler: Scaler, test: Dataset) -> np.ndarray:
    """(p+1, n) target columns: standardized x with y-hat fixed at 0"""
    x = apply_scaler(scaler, test).features
    return np.vstack([x.T, np.zeros((1, test.n))])


def predict_with_bundle(bundle: ModelBundle, test: Dataset) -> Tuple[np.ndarray, Optional[float]]:
    """
    Predict target instances with a fitted bundle.

    Returns:
        (predictions in z-units, RMSE against z-scored truth or None)
    """
    scaler, affine, model = bundle_components(bundle)
    pred = predict(model, transform(affine, target_columns(scaler, test)).T)
    score = None
    if test.response is not None and scaler.response_mean is not None:
        score = rmse(pred, (test.response - scaler.response_mean) / scaler.response_std)
    return pred, score


def write_trace(trace: List[Dict[str, float]], path: str) -> None:
    frame = pd.DataFrame(trace, columns=["sweep", "m", "sigma", "nu", "loglik"])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote {len(frame)} trace rows to {path}")


def run_pipeline(
    cfg: RunConfig,
    train: Optional[Dataset] = None,
    test: Optional[Dataset] = None,
    trace_path: Optional[str] = None,
) -> Tuple[np.ndarray, Optional[float], ModelBundle]:
    """
    Run all stages for one configuration.

    Args:
        cfg: Run configuration
        train, test: Already-loaded data; read from cfg when train is None
        trace_path: Optional CSV for the per-sweep Gibbs trace

    Returns:
        (test predictions in z-units, RMSE or None, fitted ModelBundle)
    """
    start_time = datetime.now()
    if train is None:
        train, test = load_inputs(cfg)
    elif train.n < 2:
        raise PipelineError("load", f"training set needs at least 2 instances, got {train.n}")
    if test is not None and test.n == 0:
        test = None

    scaler = _stage("scale", fit_scaler, train)
    train_s = _stage("scale", apply_scaler, scaler, train)

    mined = _stage("mine", mine_domains, train_s, cfg)
    if trace_path and mined.trace:
        write_trace(mined.trace, trace_path)
    logger.info(f"Latent domains: m={len(mined.sizes)}, sizes={mined.sizes}")

    def _adapt():
        stack = build_joint_stack(train, test, mined.partition, cfg.transfer.alpha, scaler)
        affine, _, _ = fit_transfer(stack, cfg.transfer)
        return stack, affine

    stack, affine = _stage("adapt", _adapt)

    def _ridge():
        Z = transform(affine, stack.train_columns()).T
        penalty = resolve_ridge_lambda(Z, train_s.response, cfg.ridge_lambda, cfg.ridge_grid, cfg.split_seed)
        return fit_ridge(Z, train_s.response, penalty)

    model = _stage("ridge", _ridge)

    bundle = ModelBundle(
        scaler=ScalerRecord(**scaler.to_dict()),
        partition=PartitionSummary(
            labels=mined.partition.tolist(),
            sizes=mined.sizes,
            atoms=mined.atoms.tolist(),
        ),
        affine_map=AffineMapRecord(**affine.to_dict()),
        ridge=RidgeRecord(**model.to_dict()),
        config=cfg,
    )

    if test is None:
        pred, score = np.zeros(0), None
    else:
        pred, score = _stage("predict", predict_with_bundle, bundle, test)

    elapsed = (datetime.now() - start_time).total_seconds()
    rmse_text = f"{score:.4f}" if score is not None else "n/a"
    logger.info(f"Pipeline completed in {elapsed:.1f}s: m={len(mined.sizes)}, rmse={rmse_text}")
    return pred, score, bundle


def tca_predict(
    train: Dataset,
    test: Dataset,
    cfg: RunConfig,
    jitter: Optional[float] = None,
    ridge_lambda: Optional[float] = None,
) -> Tuple[np.ndarray, Optional[float]]:
    """Feature-only adaptation followed by ridge: the TCA comparison arm"""
    scaler = fit_scaler(train)
    train_s = apply_scaler(scaler, train)
    test_s = apply_scaler(scaler, test)
    affine = tca_baseline(train_s.features, test_s.features, cfg.transfer, jitter=jitter, names=train.names)
    Z = transform(affine, train_s.features.T).T
    if ridge_lambda is None:
        ridge_lambda = resolve_ridge_lambda(Z, train_s.response, cfg.ridge_lambda, cfg.ridge_grid, cfg.split_seed)
    model = fit_ridge(Z, train_s.response, ridge_lambda)
    pred = predict(model, transform(affine, test_s.features.T).T)
    score = rmse(pred, test_s.response) if test_s.response is not None else None
    return pred, score


def generate_synthetic(spec: SynthSpec) -> Tuple[Dataset, np.ndarray, Optional[Dataset], np.ndarray]:
    """
    Planted latent-domain data: y = (1, x) A_k + noise for domain k.

    Features of domain k are N(shift_k, 1), shift_k a scalar or a vector.
    Target instances pick a domain uniformly at random and are offset by
    target_shift.

    Returns:
        (train, train labels 1..K, test or None, test labels)
    """
    rng = make_rng(spec.seed)
    atoms = np.asarray(spec.atoms, dtype=float)
    shifts = np.zeros((spec.n_domains, spec.n_features))
    for k, shift in enumerate(spec.feature_shift):
        shifts[k] = shift
    target_offset = np.asarray(spec.target_shift or np.zeros(spec.n_features), dtype=float)
    names = [f"x{j + 1}" for j in range(spec.n_features)]

    def _draw(labels: np.ndarray, role: str, offset: np.ndarray) -> Dataset:
        x = rng.standard_normal((labels.shape[0], spec.n_features)) + shifts[labels - 1] + offset
        noise = spec.noise_std * rng.standard_normal(labels.shape[0])
        y = np.einsum("ij,ij->i", design_matrix(x), atoms[labels - 1]) + noise
        return Dataset(features=x, names=names, response=y, role=role)

    train_labels = np.repeat(np.arange(1, spec.n_domains + 1), spec.sizes)
    train = _draw(train_labels, "train", np.zeros(spec.n_features))

    test, test_labels = None, np.zeros(0, dtype=int)
    if spec.test_size:
        test_labels = rng.integers(1, spec.n_domains + 1, size=spec.test_size)
        test = _draw(test_labels, "test", target_offset)
    return train, train_labels, test, test_labels


def synth(spec: SynthSpec, out_dir: str, response_column: str = "y") -> Dict[str, Path]:
    """Write train.csv and labels.csv (plus test.csv and test_labels.csv when test_size > 0)"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, train_labels, test, test_labels = generate_synthetic(spec)

    paths = {"train": out / "train.csv", "labels": out / "labels.csv"}
    write_csv(train, str(paths["train"]), response_column)
    pd.DataFrame({"domain": train_labels}).to_csv(paths["labels"], index=False, lineterminator="\n")
    if test is not None:
        paths["test"] = out / "test.csv"
        paths["test_labels"] = out / "test_labels.csv"
        write_csv(test, str(paths["test"]), response_column)
        pd.DataFrame({"domain": test_labels}).to_csv(paths["test_labels"], index=False, lineterminator="\n")

    logger.info(f"Synthesized {train.n} training instances in {spec.n_domains} domains to {out}")
    return paths


def emit_projection(
    bundle: ModelBundle,
    train: Dataset,
    test: Optional[Dataset],
    mode: ProjectionMode,
    out_path: Optional[str] = None,
) -> pd.DataFrame:
    """
    2-D coordinates of every instance labelled by latent domain or 'target'.

    mode='pca' projects the standardized original features; mode='transferred'
    takes the first two rows of B' d for each instance.
    """
    if len(bundle.partition.labels) != train.n:
        raise PipelineError("predict", f"bundle was fitted on {len(bundle.partition.labels)} instances, got {train.n}")
    scaler, affine, _ = bundle_components(bundle)
    worker = ProjectionWorker()
    n_test = 0 if test is None else test.n
    train_s = apply_scaler(scaler, train)

    if mode == "pca":
        rows = [train_s.features] + ([apply_scaler(scaler, test).features] if n_test else [])
        coords = worker.compute_pca(np.vstack(rows))
    elif mode == "transferred":
        stack = build_joint_stack(
            train, test if n_test else None, np.asarray(bundle.partition.labels), bundle.config.transfer.alpha, scaler
        )
        coords = worker.compute_transferred(affine, np.hstack([stack.train_columns(), stack.test_columns()]))
    else:
        raise PipelineError("predict", f"unknown projection mode '{mode}'")

    frame = projection_frame(coords, domain_labels(bundle.partition.labels, n_test))
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out_path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
        logger.info(f"Wrote {mode} projection ({len(frame)} rows) to {out_path}")
    return frame
