"""
Two-dimensional projections of latent domains for plotting.

Computes PCA scores of the standardized original data and the leading
coordinates of the transferred feature space, each labelled by latent
domain (1..m) or 'target'.
"""

import logging
from datetime import datetime
from typing import List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.decomposition import PCA

from workers.adapt import AffineMap, transform

logger = logging.getLogger(__name__)

TARGET_LABEL = "target"
ProjectionMode = Literal["pca", "transferred"]


class ProjectionError(Exception):
    """Projection cannot be produced for the given inputs"""
    pass


class ProjectionWorker:
    """Produces 2-D coordinates of latent domains before and after transfer."""

    def compute_pca(self, features: np.ndarray, n_components: int = 2) -> np.ndarray:
        """
        Principal-component scores of standardized features.

        Args:
            features: (N, p) standardized rows
            n_components: Output dimension

        Returns:
            (N, n_components) scores; missing components (p < 2) are zero
        """
        logger.info(f"Computing PCA projection for {features.shape[0]} instances...")
        start_time = datetime.now()

        k = min(n_components, features.shape[1], features.shape[0])
        scores = PCA(n_components=k, svd_solver="full").fit_transform(features)
        if k < n_components:
            scores = np.hstack([scores, np.zeros((features.shape[0], n_components - k))])

        elapsed = (datetime.now() - start_time).total_seconds()
        logger.info(f"PCA completed in {elapsed:.1f}s")
        return scores

    def compute_transferred(self, affine: AffineMap, D_cols: np.ndarray) -> np.ndarray:
        """First two rows of B' D, one row per instance; a q=1 map gets a zero second coordinate"""
        coords = transform(affine, D_cols)[:2].T
        if coords.shape[1] < 2:
            coords = np.hstack([coords, np.zeros((coords.shape[0], 2 - coords.shape[1]))])
        return coords


def domain_labels(partition: Sequence[int], n_target: int) -> List[str]:
    """Latent-domain labels as strings, followed by 'target' for test rows"""
    return [str(int(k)) for k in partition] + [TARGET_LABEL] * n_target


def projection_frame(coords: np.ndarray, labels: Sequence[str]) -> pd.DataFrame:
    if coords.shape[0] != len(labels):
        raise ProjectionError(f"{coords.shape[0]} coordinates for {len(labels)} labels")
    return pd.DataFrame({"x1": coords[:, 0], "x2": coords[:, 1], "domain": list(labels)})
