"""
Seeded samplers and density kernels for the latent-domain Gibbs sampler.

All draws go through a numpy Generator (PCG64), so one seed and one
call sequence always give the same stream.
"""

import logging
import math
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MAX_JITTER = 1e-2
SYMMETRY_TOL = 1e-10

Rng = np.random.Generator


class SamplerError(Exception):
    """Base exception for sampling operations"""
    pass


class CholeskyError(SamplerError):
    """Covariance not factorizable even after jitter escalation"""

    def __init__(self, message: str, jitter: float):
        self.jitter = jitter
        super().__init__(message)


@dataclass(frozen=True)
class GammaParams:
    """Gamma distribution in shape-rate form"""
    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise SamplerError(f"Gamma needs shape > 0 and rate > 0, got shape={self.shape}, rate={self.rate}")


def make_rng(seed: int) -> Rng:
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, count: int) -> List[Rng]:
    """Independent child streams for concurrent chains"""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.PCG64(child)) for child in children]


def sample_gamma(rng: Rng, params: GammaParams) -> float:
    """Gamma draw in shape-rate form (mean = shape / rate)"""
    return float(rng.gamma(params.shape, 1.0 / params.rate))


def sample_beta(rng: Rng, a: float, b: float) -> float:
    if not (a > 0 and b > 0):
        raise SamplerError(f"Beta needs a > 0 and b > 0, got a={a}, b={b}")
    return float(rng.beta(a, b))


def cholesky_with_jitter(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of cov + jitter*I, escalating jitter x10 up to 1e-2."""
    k = cov.shape[0]
    scale = float(np.mean(np.abs(np.diag(cov)))) or 1.0
    jitter = 0.0
    while True:
        try:
            return linalg.cholesky(cov + jitter * np.eye(k), lower=True)
        except linalg.LinAlgError:
            jitter = 1e-12 * scale if jitter == 0.0 else jitter * 10.0
            if jitter > MAX_JITTER * scale:
                raise CholeskyError(f"Cholesky failed up to jitter {jitter / 10.0:.3g}", jitter / 10.0)
            logger.debug(f"Cholesky retry with jitter {jitter:.3g}")


def sample_mvn(rng: Rng, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Multivariate normal draw via Cholesky of (cov + jitter*I)"""
    mean = np.asarray(mean, dtype=float).ravel()
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    k = mean.shape[0]
    if cov.shape != (k, k):
        raise SamplerError(f"covariance shape {cov.shape} does not match mean length {k}")
    if not np.allclose(cov, cov.T, rtol=0.0, atol=SYMMETRY_TOL):
        raise SamplerError("covariance is not symmetric")
    z = rng.standard_normal(k)
    if not np.any(cov):
        return mean.copy()
    return mean + cholesky_with_jitter(cov) @ z


def sample_categorical(rng: Rng, weights: np.ndarray) -> int:
    """Index i with probability weights[i] / sum(weights)"""
    weights = np.asarray(weights, dtype=float).ravel()
    if weights.size == 0 or not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise SamplerError("categorical weights must be finite and nonnegative")
    total = weights.sum()
    if total <= 0:
        raise SamplerError("categorical weights are all zero")
    cdf = np.cumsum(weights)
    index = int(np.searchsorted(cdf, rng.random() * total, side="right"))
    # Guard the u*total == cdf[-1] rounding edge and skip zero-weight tails
    index = min(index, weights.size - 1)
    while weights[index] == 0:
        index -= 1
    return index


def sample_log_categorical(rng: Rng, log_weights: np.ndarray) -> int:
    """Categorical draw from unnormalized log weights (max-subtracted)"""
    log_weights = np.asarray(log_weights, dtype=float).ravel()
    if np.all(np.isneginf(log_weights)):
        raise SamplerError("categorical weights are all zero")
    if np.any(np.isnan(log_weights)) or np.any(np.isposinf(log_weights)):
        raise SamplerError("log weights must be finite or -inf")
    return sample_categorical(rng, np.exp(log_weights - logsumexp(log_weights)))


def logpdf_normal(y, mean, var):
    """Exact univariate normal log density; vectorizes over arrays"""
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0):
        raise SamplerError(f"variance must be positive, got {var}")
    result = -0.5 * (LOG_2PI + np.log(var) + (np.asarray(y) - np.asarray(mean)) ** 2 / var)
    return float(result) if np.ndim(result) == 0 else result
