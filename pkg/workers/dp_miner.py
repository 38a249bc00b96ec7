"""
Latent-domain miner: Gibbs sampler for a Dirichlet-process mixture of
linear regressions.

Each training instance carries a coefficient vector A_i drawn from a DP
with a N(0, Lambda * Sigma) base measure; instances sharing an atom Q_k
form one latent domain. Sigma is the scalar residual variance, Lambda is
diagonal, and nu is the DP concentration.
"""

import asyncio
import logging
from collections import Counter
from dataclasses import dataclass
from datetime import datetime
from typing import Dict, List, Tuple

import numpy as np
from scipy import linalg

from models.config import GibbsConfig, Hyperparams, PartitionRule
from workers.stochastics import (
    GammaParams,
    Rng,
    logpdf_normal,
    make_rng,
    sample_beta,
    sample_gamma,
    sample_log_categorical,
    sample_mvn,
    spawn_rngs,
)

logger = logging.getLogger(__name__)

TINY = np.finfo(float).tiny


class MinerError(Exception):
    """Base exception for latent-domain mining"""
    pass


@dataclass
class DPState:
    """
    Sampler state. Cluster indices in `z` are zero-based; the partition
    handed to callers is `z + 1`.
    """
    z: np.ndarray
    atoms: np.ndarray
    sigma: float
    lam: np.ndarray
    nu: float
    counts: np.ndarray

    @property
    def m(self) -> int:
        return self.atoms.shape[0]

    def check(self, n: int) -> None:
        """Raise if a state invariant is broken"""
        if self.counts.sum() != n or self.counts.shape[0] != self.m:
            raise MinerError(f"counts {self.counts.tolist()} inconsistent with n={n}, m={self.m}")
        if np.any(self.counts < 1):
            raise MinerError("empty cluster left in state")
        if np.unique(self.z).shape[0] != self.m:
            raise MinerError("number of labels differs from number of atoms")
        if not (self.sigma > 0 and self.nu > 0 and np.all(self.lam > 0)):
            raise MinerError(f"non-positive scale: sigma={self.sigma}, nu={self.nu}, lambda={self.lam}")


@dataclass
class GibbsResult:
    """Output of one chain"""
    partition: np.ndarray  # labels 1..m
    atoms: np.ndarray
    trace: List[Dict[str, float]]
    state: DPState
    loglik: float

    @property
    def m(self) -> int:
        return self.atoms.shape[0]

    @property
    def sizes(self) -> List[int]:
        return np.bincount(self.partition)[1:].tolist()


def design_matrix(features: np.ndarray) -> np.ndarray:
    """Prepend the intercept column: rows are x_i = (1, features_i)"""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    return np.hstack([np.ones((features.shape[0], 1)), features])


def log_q0(x_i: np.ndarray, y_i: float, sigma: float, lam: np.ndarray, nu: float) -> float:
    if nu <= 0:
        return -np.inf
    var = (float(x_i @ (lam * x_i)) + 1.0) * sigma
    return float(np.log(nu) + logpdf_normal(y_i, 0.0, var))


def q0_marginal(x_i: np.ndarray, y_i: float, sigma: float, lam: np.ndarray, nu: float) -> float:
    """nu * N(y_i | 0, (x_i Lambda x_i' + 1) Sigma): new-cluster weight with A_i integrated out"""
    return float(np.exp(log_q0(np.asarray(x_i, dtype=float), y_i, sigma, np.asarray(lam, dtype=float), nu)))


def atom_posterior(Xk: np.ndarray, Yk: np.ndarray, lam: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Conjugate posterior for one atom given its members.

    Returns:
        (Theta X_k' Y_k, Theta) with Theta = (Lambda^-1 + X_k' X_k)^-1; the
        draw covariance is Theta * Sigma. With no members this is the prior.
    """
    Xk = np.atleast_2d(Xk)
    precision = np.diag(1.0 / lam) + Xk.T @ Xk
    factor = linalg.cho_factor(precision, lower=True)
    theta = linalg.cho_solve(factor, np.eye(lam.shape[0]))
    theta = 0.5 * (theta + theta.T)
    return theta @ (Xk.T @ np.asarray(Yk, dtype=float).ravel()), theta


def initial_state(rng: Rng, X: np.ndarray, Y: np.ndarray) -> DPState:
    """One cluster holding every instance; atom drawn from its posterior"""
    n, dim = X.shape
    sigma = float(np.var(Y)) or 1.0
    lam = np.ones(dim)
    mean, theta = atom_posterior(X, Y, lam)
    atom = sample_mvn(rng, mean, theta * sigma)
    return DPState(
        z=np.zeros(n, dtype=int),
        atoms=atom[None, :],
        sigma=sigma,
        lam=lam,
        nu=1.0,
        counts=np.array([n]),
    )


def _remove_instance(state: DPState, i: int) -> None:
    k = state.z[i]
    state.counts[k] -= 1
    state.z[i] = -1
    if state.counts[k] == 0:
        state.atoms = np.delete(state.atoms, k, axis=0)
        state.counts = np.delete(state.counts, k)
        state.z[state.z > k] -= 1


def assignment_log_weights(state: DPState, x_i: np.ndarray, y_i: float) -> np.ndarray:
    """[log n_k(-i) N(y_i | x_i Q_k, Sigma) for k..., log q0]; instance i already removed"""
    existing = np.log(state.counts) + logpdf_normal(y_i, state.atoms @ x_i, state.sigma)
    return np.append(existing, log_q0(x_i, y_i, state.sigma, state.lam, state.nu))


def sample_assignment(rng: Rng, i: int, state: DPState, x_i: np.ndarray, y_i: float) -> DPState:
    """Remove instance i from its cluster and reseat it by the Polya-urn conditional."""
    _remove_instance(state, i)
    choice = sample_log_categorical(rng, assignment_log_weights(state, x_i, y_i))

    if choice == state.m:
        mean, c_i = atom_posterior(x_i[None, :], np.array([y_i]), state.lam)
        atom = sample_mvn(rng, mean, c_i * state.sigma)
        state.atoms = np.vstack([state.atoms, atom])
        state.counts = np.append(state.counts, 1)
    else:
        state.counts[choice] += 1
    state.z[i] = choice
    return state


def resample_atoms(rng: Rng, state: DPState, X: np.ndarray, Y: np.ndarray) -> DPState:
    """Q_k ~ N(Theta_k X_k' Y_k, Theta_k Sigma) for every cluster"""
    for k in range(state.m):
        members = state.z == k
        mean, theta = atom_posterior(X[members], Y[members], state.lam)
        state.atoms[k] = sample_mvn(rng, mean, theta * state.sigma)
    return state


def residuals(state: DPState, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return Y - np.einsum("ij,ij->i", X, state.atoms[state.z])


def sigma_posterior(state: DPState, X: np.ndarray, Y: np.ndarray, hp: Hyperparams) -> GammaParams:
    """Posterior of 1/Sigma: Ga(a0 + n/2, b0 + sum r_i^2 / 2)"""
    r = residuals(state, X, Y)
    return GammaParams(hp.a0 + 0.5 * Y.shape[0], hp.b0 + 0.5 * float(r @ r))


def update_sigma(rng: Rng, state: DPState, X: np.ndarray, Y: np.ndarray, hp: Hyperparams) -> DPState:
    state.sigma = 1.0 / max(sample_gamma(rng, sigma_posterior(state, X, Y, hp)), TINY)
    return state


def lambda_posterior(state: DPState, hp: Hyperparams) -> List[GammaParams]:
    """Per-coordinate posterior of 1/lambda_i: Ga((a_i + m)/2, (b_i + sum_k (r_i^k)^2 / Sigma)/2)"""
    a_vec, b_vec = hp.prior_vectors(state.lam.shape[0])
    sq = (state.atoms ** 2).sum(axis=0) / state.sigma if state.m else np.zeros_like(a_vec)
    return [GammaParams((a + state.m) / 2.0, (b + s) / 2.0) for a, b, s in zip(a_vec, b_vec, sq)]


def update_lambda(rng: Rng, state: DPState, hp: Hyperparams) -> DPState:
    draws = np.array([sample_gamma(rng, g) for g in lambda_posterior(state, hp)])
    state.lam = 1.0 / np.maximum(draws, TINY)
    return state


def nu_mixture_weight(nu: float, m: int, hp: Hyperparams, n: int, h: float) -> float:
    """pi0 = (nu + m - 1) / (a_v + m - 1 + n (b_v - log h)), clipped to [0, 1]"""
    pi0 = (nu + m - 1.0) / (hp.av + m - 1.0 + n * (hp.bv - np.log(h)))
    return float(min(max(pi0, 0.0), 1.0))


def update_nu(rng: Rng, state: DPState, hp: Hyperparams, n: int) -> DPState:
    """Auxiliary-variable update of the concentration"""
    h = min(max(sample_beta(rng, state.nu + 1.0, n), TINY), 1.0 - 1e-16)
    rate = hp.bv - np.log(h)
    pi0 = nu_mixture_weight(state.nu, state.m, hp, n, h)
    shape = hp.av + state.m if rng.random() < pi0 else hp.av + state.m - 1.0
    state.nu = max(sample_gamma(rng, GammaParams(shape, rate)), TINY)
    return state


def canonicalize(z: np.ndarray, atoms: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Relabel clusters in order of first appearance over instances"""
    labels, first = np.unique(z, return_index=True)
    old_order = labels[np.argsort(first)]
    mapping = np.empty(int(labels.max()) + 1, dtype=int)
    mapping[old_order] = np.arange(old_order.shape[0])
    return mapping[z], atoms[old_order]


def partition_signature(z: np.ndarray) -> Tuple[int, ...]:
    labels, first = np.unique(z, return_index=True)
    mapping = {int(old): new for new, old in enumerate(labels[np.argsort(first)])}
    return tuple(mapping[int(k)] for k in z)


def log_likelihood(state: DPState, X: np.ndarray, Y: np.ndarray) -> float:
    fitted = np.einsum("ij,ij->i", X, state.atoms[state.z])
    return float(np.sum(logpdf_normal(Y, fitted, state.sigma)))


def gibbs_sweep(rng: Rng, state: DPState, X: np.ndarray, Y: np.ndarray, hp: Hyperparams) -> DPState:
    """Assignments for all i, then atoms, Sigma, Lambda, nu; labels compacted afterwards"""
    n = X.shape[0]
    for i in range(n):
        sample_assignment(rng, i, state, X[i], float(Y[i]))
    resample_atoms(rng, state, X, Y)
    update_sigma(rng, state, X, Y, hp)
    update_lambda(rng, state, hp)
    update_nu(rng, state, hp, n)
    state.z, state.atoms = canonicalize(state.z, state.atoms)
    state.counts = np.bincount(state.z, minlength=state.m)
    return state


def run_gibbs(rng: Rng, X: np.ndarray, Y: np.ndarray, hp: Hyperparams, cfg: GibbsConfig) -> GibbsResult:
    """
    Run cfg.sweeps full sweeps and read off the partition.

    Args:
        rng: Chain-owned generator
        X: (n, p+1) design with the intercept column first
        Y: (n,) responses
        hp: Prior hyperparameters
        cfg: Sweep budget, burn-in and partition rule

    Returns:
        GibbsResult with 1-based partition, matching atoms and per-sweep trace
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != Y.shape[0] or X.shape[0] < 1:
        raise MinerError(f"design {X.shape} and response {Y.shape} do not line up")

    start_time = datetime.now()
    state = initial_state(rng, X, Y)
    trace: List[Dict[str, float]] = []
    signatures: Counter = Counter()
    modal_atoms: Dict[Tuple[int, ...], np.ndarray] = {}

    for sweep in range(cfg.sweeps):
        gibbs_sweep(rng, state, X, Y, hp)
        state.check(X.shape[0])
        loglik = log_likelihood(state, X, Y)
        trace.append({"sweep": sweep + 1, "m": state.m, "sigma": state.sigma, "nu": state.nu, "loglik": loglik})
        logger.debug(f"sweep {sweep + 1}: m={state.m}, sigma={state.sigma:.4g}, nu={state.nu:.4g}")

        if cfg.partition_rule == PartitionRule.MODAL and sweep >= cfg.burn_in:
            signature = partition_signature(state.z)
            signatures[signature] += 1
            modal_atoms[signature] = state.atoms.copy()

    if cfg.partition_rule == PartitionRule.MODAL and signatures:
        signature, hits = signatures.most_common(1)[0]
        z = np.array(signature, dtype=int)
        atoms = modal_atoms[signature]
        logger.info(f"Modal partition seen in {hits}/{cfg.sweeps - cfg.burn_in} post-burn-in sweeps")
    else:
        z, atoms = state.z.copy(), state.atoms.copy()

    elapsed = (datetime.now() - start_time).total_seconds()
    result = GibbsResult(
        partition=z + 1,
        atoms=atoms,
        trace=trace,
        state=state,
        loglik=trace[-1]["loglik"],
    )
    logger.info(f"Gibbs completed in {elapsed:.1f}s: m={result.m}, sizes={result.sizes}")
    return result


async def _run_chains_async(X, Y, hp: Hyperparams, cfg: GibbsConfig) -> List[GibbsResult]:
    rngs = spawn_rngs(cfg.seed, cfg.n_chains)
    tasks = [asyncio.to_thread(run_gibbs, rng, X, Y, hp, cfg) for rng in rngs]
    return await asyncio.gather(*tasks)


def run_chains(X: np.ndarray, Y: np.ndarray, hp: Hyperparams, cfg: GibbsConfig) -> GibbsResult:
    """One chain seeded by cfg.seed, or the best-likelihood chain of cfg.n_chains concurrent ones."""
    if cfg.n_chains == 1:
        return run_gibbs(make_rng(cfg.seed), X, Y, hp, cfg)

    results = asyncio.run(_run_chains_async(X, Y, hp, cfg))
    best = max(range(len(results)), key=lambda c: results[c].loglik)
    logger.info(f"Chain {best + 1}/{len(results)} selected (loglik {results[best].loglik:.2f})")
    return results[best]


def merge_small_clusters(
    partition: np.ndarray, atoms: np.ndarray, floor: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Fold clusters with fewer than `floor` members into the nearest retained atom.

    Distance is Euclidean on coefficient vectors. Labels are 1-based on
    input and output.
    """
    partition = np.asarray(partition, dtype=int)
    counts = np.bincount(partition - 1, minlength=atoms.shape[0])
    keep = np.flatnonzero(counts >= floor)
    if keep.size == 0:
        logger.warning(f"No cluster reaches size {floor}; partition left unmerged")
        return partition.copy(), atoms.copy()
    if keep.size == atoms.shape[0]:
        return partition.copy(), atoms.copy()

    z = partition - 1
    for k in np.flatnonzero(counts < floor):
        nearest = keep[np.argmin(np.linalg.norm(atoms[keep] - atoms[k], axis=1))]
        z[z == k] = nearest
    logger.info(f"Merged {atoms.shape[0] - keep.size} clusters below size {floor}")

    remap = np.full(atoms.shape[0], -1)
    remap[keep] = np.arange(keep.size)
    z, merged_atoms = canonicalize(remap[z], atoms[keep])
    return z + 1, merged_atoms
