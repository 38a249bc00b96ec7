"""
Joint-distribution adaptation across latent domains and the target domain.

Learns a (p+1) x q affine map B minimizing the multi-domain MMD
tr(B' D S D' B) plus graph smoothness tau * tr(B' D L D' B) and the
response penalty mu * tr(B' J B), under the variance constraint
B' D H D' B = I.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from sklearn.neighbors import kneighbors_graph

from models.config import TransferConfig
from workers.dataset import JointStack

logger = logging.getLogger(__name__)

MAX_RELATIVE_JITTER = 1e-2


class TransferError(Exception):
    """Base exception for the adaptation solver"""
    pass


class CholeskyError(TransferError):
    """Variance matrix not factorizable after jitter escalation"""

    def __init__(self, message: str, jitter: float):
        self.jitter = jitter
        super().__init__(message)


@dataclass
class AffineMap:
    """Projection B into the shared q-dimensional space"""
    B: np.ndarray
    input_semantics: List[str]
    eigvals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jitter: float = 0.0

    @property
    def q(self) -> int:
        return self.B.shape[1]

    def to_dict(self) -> dict:
        return {
            "B": self.B.tolist(),
            "q": self.q,
            "input_semantics": list(self.input_semantics),
            "eigvals": self.eigvals.tolist(),
            "jitter": self.jitter,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AffineMap":
        B = np.asarray(data["B"], dtype=float)
        if B.ndim != 2 or B.shape[1] != data["q"]:
            raise TransferError(f"B has shape {B.shape}, expected q={data['q']} columns")
        return cls(
            B=B,
            input_semantics=list(data["input_semantics"]),
            eigvals=np.asarray(data.get("eigvals", []), dtype=float),
            jitter=float(data.get("jitter", 0.0)),
        )


def build_S(domain_sizes: Sequence[int]) -> np.ndarray:
    """
    Multi-domain MMD matrix.

    S_ij = m / n_k^2 within domain k and -1 / (n_k n_l) across domains,
    where m = number of domains - 1.
    """
    sizes = np.asarray(domain_sizes, dtype=int)
    if sizes.shape[0] < 2:
        raise TransferError(f"need at least two domains, got {sizes.shape[0]}")
    if np.any(sizes < 1):
        raise TransferError(f"every domain needs at least one instance, got {sizes.tolist()}")
    k = sizes.shape[0]
    E = np.zeros((sizes.sum(), k))
    E[np.arange(sizes.sum()), np.repeat(np.arange(k), sizes)] = 1.0 / np.repeat(sizes, sizes)
    G = k * np.eye(k) - np.ones((k, k))
    return E @ G @ E.T


def build_pairwise_S(n_k: int, n_l: int) -> np.ndarray:
    """Two-domain MMD matrix over the stacked [d^k, d^l] columns"""
    e = np.concatenate([np.full(n_k, 1.0 / n_k), np.full(n_l, -1.0 / n_l)])
    return np.outer(e, e)


def pairwise_dist(dk: np.ndarray, dl: np.ndarray, basis: Optional[np.ndarray] = None) -> float:
    """
    Squared distance between mapped domain means.

    Args:
        dk, dl: (p+1, n_k) and (p+1, n_l) instance columns
        basis: B of the linear map d -> B'd; identity when None
    """
    dk = np.atleast_2d(dk)
    dl = np.atleast_2d(dl)
    if dk.shape[1] == 0 or dl.shape[1] == 0:
        raise TransferError("pairwise distance needs two nonempty domains")
    diff = dk.mean(axis=1) - dl.mean(axis=1)
    if basis is not None:
        diff = basis.T @ diff
    return float(diff @ diff)


def multi_domain_distance(D: np.ndarray, domain_sizes: Sequence[int], basis: Optional[np.ndarray] = None) -> float:
    """tr(B' D S D' B): the sum of pairwise distances over all domain pairs"""
    projected = D if basis is None else basis.T @ D
    return float(np.trace(projected @ build_S(domain_sizes) @ projected.T))


def build_knn_graph(D: np.ndarray, knn: int) -> np.ndarray:
    """Binary kNN adjacency over the columns of D, symmetrized by union"""
    N = D.shape[1]
    if N <= 1:
        raise TransferError(f"kNN graph needs at least two instances, got {N}")
    if knn >= N:
        raise TransferError(f"knn={knn} must be smaller than the instance count {N}")
    W = kneighbors_graph(D.T, n_neighbors=knn, mode="connectivity", include_self=False).toarray()
    W = np.maximum(W, W.T)
    np.fill_diagonal(W, 0.0)
    return W


def build_laplacian(W: np.ndarray) -> np.ndarray:
    """L = I - Deg^-1/2 W Deg^-1/2; isolated vertices keep L_ii = 1"""
    degree = W.sum(axis=1)
    inv_sqrt = np.zeros_like(degree)
    connected = degree > 0
    inv_sqrt[connected] = 1.0 / np.sqrt(degree[connected])
    return np.eye(W.shape[0]) - inv_sqrt[:, None] * W * inv_sqrt[None, :]


def build_H(N: int) -> np.ndarray:
    if N < 1:
        raise TransferError("centering matrix needs N >= 1")
    return np.eye(N) - np.full((N, N), 1.0 / N)


def build_J(p: int, beta: float) -> np.ndarray:
    """diag(1, ..., 1, beta) of side p + 1"""
    if beta < 0:
        raise TransferError(f"beta must be >= 0, got {beta}")
    return np.diag(np.append(np.ones(p), beta))


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of each column made positive
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def solve_pencil(A: np.ndarray, C: np.ndarray, q: int, jitter: float) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    q smallest eigenpairs of A b = lambda (C + jitter I) b.

    C + jitter I is Cholesky-factored (jitter escalated x10 on failure) and
    the pencil reduced to the standard problem L^-1 A L^-T.

    Returns:
        (B, eigvals, jitter used); B' (C + jitter I) B = I_q
    """
    k = A.shape[0]
    if q > k:
        raise TransferError(f"q={q} exceeds the input dimension {k}")
    scale = max(float(np.trace(C)) / k, np.finfo(float).tiny)
    ceiling = MAX_RELATIVE_JITTER * scale
    while True:
        try:
            lower = linalg.cholesky(C + jitter * np.eye(k), lower=True)
            break
        except linalg.LinAlgError:
            nxt = jitter * 10.0 if jitter > 0 else 1e-12 * scale
            if nxt > ceiling:
                raise CholeskyError(f"variance matrix not positive definite up to jitter {jitter:.3g}", jitter)
            jitter = nxt
            logger.warning(f"Escalating variance jitter to {jitter:.3g}")

    half = linalg.solve_triangular(lower, A, lower=True)
    reduced = linalg.solve_triangular(lower, half.T, lower=True)
    reduced = 0.5 * (reduced + reduced.T)
    eigvals, vectors = linalg.eigh(reduced, subset_by_index=[0, q - 1])
    B = _fix_signs(linalg.solve_triangular(lower.T, vectors, lower=False))
    return B, eigvals, jitter


def solve_transfer(
    D: np.ndarray,
    S: np.ndarray,
    L: np.ndarray,
    H: np.ndarray,
    J: np.ndarray,
    cfg: TransferConfig,
    names: Optional[Sequence[str]] = None,
    jitter: Optional[float] = None,
) -> Tuple[AffineMap, np.ndarray]:
    """
    Learn B from (D M D' + mu J) b = lambda (D H D' + jitter I) b with M = S + tau L.

    Args:
        D: (p+1, N) joint representation
        S, L, H: (N, N) MMD, Laplacian and centering matrices
        J: (p+1, p+1) response regularizer
        cfg: Transfer parameters (mu, tau, q, relative jitter)
        names: Row semantics of D
        jitter: Absolute jitter; defaults to cfg.jitter * tr(D H D') / (p+1)

    Returns:
        (AffineMap, eigenvalues of the q selected directions)
    """
    dim = D.shape[0]
    if cfg.q > dim:
        raise TransferError(f"q={cfg.q} exceeds p+1={dim}")
    M = S + cfg.tau * L
    A = D @ M @ D.T + cfg.mu * J
    A = 0.5 * (A + A.T)
    C = D @ H @ D.T
    C = 0.5 * (C + C.T)
    if jitter is None:
        jitter = cfg.jitter * (float(np.trace(C)) / dim or 1.0)

    B, eigvals, used = solve_pencil(A, C, cfg.q, jitter)
    semantics = list(names) if names is not None else [f"d{i}" for i in range(dim)]
    logger.info(f"Transfer solved: q={cfg.q}, eigvals={np.round(eigvals, 6).tolist()}, jitter={used:.3g}")
    return AffineMap(B=B, input_semantics=semantics, eigvals=eigvals, jitter=used), eigvals


def transform(affine: AffineMap, D_cols: np.ndarray) -> np.ndarray:
    """B' D_cols: (q, N) coordinates in the shared space"""
    D_cols = np.atleast_2d(D_cols)
    if D_cols.shape[0] != affine.B.shape[0]:
        raise TransferError(f"input has {D_cols.shape[0]} rows, map expects {affine.B.shape[0]}")
    return affine.B.T @ D_cols


def tca_baseline(
    x_train: np.ndarray,
    x_test: np.ndarray,
    cfg: TransferConfig,
    jitter: Optional[float] = None,
    names: Optional[Sequence[str]] = None,
) -> AffineMap:
    """
    Feature-only adaptation between one source and the target domain.

    This is the tau = 0 special case on x alone: J = I and no response row.

    Args:
        x_train, x_test: (n, p) standardized rows
        cfg: Uses mu, q and the relative jitter
        jitter: Absolute jitter, to match a full solve exactly
    """
    x_train = np.atleast_2d(x_train)
    x_test = np.atleast_2d(x_test)
    D = np.hstack([x_train.T, x_test.T]).reshape(x_train.shape[1], -1)
    N = D.shape[1]
    n_test = x_test.shape[0] if x_test.size else 0
    S = build_S([x_train.shape[0], n_test]) if n_test else np.zeros((N, N))
    affine, _ = solve_transfer(
        D, S, np.zeros((N, N)), build_H(N), np.eye(D.shape[0]), cfg, names=names, jitter=jitter
    )
    return affine


def _spectrum_bounds(matrix: np.ndarray) -> Tuple[float, float]:
    values = linalg.eigvalsh(matrix)
    return float(values[0]), float(values[-1])


def fit_transfer(
    stack: JointStack, cfg: TransferConfig, diagnostics: bool = False, jitter: Optional[float] = None
) -> Tuple[AffineMap, np.ndarray, Dict[str, float]]:
    """
    Assemble S, W, L, H, J for a joint stack and solve for the affine map.

    Fewer than two domains (one latent domain, empty target) leaves nothing
    to align; the MMD term is then dropped and only the regularizers act.
    """
    D = stack.D
    N = D.shape[1]
    p = D.shape[0] - 1
    logger.info(f"Joint stack: {stack.n_latent} latent domains, {N - stack.n_train} target columns")
    if cfg.q > p and cfg.alpha > 0:
        # B spans the response row; ridge can lean on a coordinate that is 0 for every target column
        logger.warning(f"q={cfg.q} reaches p+1={p + 1}: the map keeps the response coordinate")
    if len(stack.domain_sizes) >= 2:
        S = build_S(stack.domain_sizes)
    else:
        logger.warning("Single domain in the joint stack; MMD term dropped")
        S = np.zeros((N, N))

    if cfg.tau > 0:
        L = build_laplacian(build_knn_graph(D, min(cfg.knn, N - 1)))
    else:
        L = np.zeros((N, N))
    H = build_H(N)
    J = build_J(D.shape[0] - 1, cfg.beta)

    affine, eigvals = solve_transfer(D, S, L, H, J, cfg, names=stack.names, jitter=jitter)

    report: Dict[str, float] = {}
    if diagnostics:
        report["S_min"], report["S_max"] = _spectrum_bounds(S)
        report["L_min"], report["L_max"] = _spectrum_bounds(L)
        report["distance_before"] = multi_domain_distance(D, stack.domain_sizes) if len(stack.domain_sizes) >= 2 else 0.0
        report["distance_after"] = (
            multi_domain_distance(D, stack.domain_sizes, affine.B) if len(stack.domain_sizes) >= 2 else 0.0
        )
    return affine, eigvals, report
