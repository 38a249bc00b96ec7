from pydantic import BaseModel, Field, model_validator
from typing import Any, Dict, List, Optional, Tuple, Union
from enum import Enum
import hashlib
import json

import numpy as np


class PartitionRule(str, Enum):
    """How the final partition is read off the Gibbs chain"""
    LAST_SWEEP = "last-sweep"
    MODAL = "modal"


class MiningMode(str, Enum):
    """Latent-domain source for the transfer stage"""
    DP = "dp"
    SINGLE = "single"  # every training instance in one latent domain


class Hyperparams(BaseModel):
    """Conjugate prior hyperparameters (shape-rate Gamma everywhere)"""
    a0: float = Field(default=50.0, gt=0, description="Gamma shape for 1/sigma")
    b0: float = Field(default=1.0, gt=0, description="Gamma rate for 1/sigma")
    av: float = Field(default=1.0, gt=0, description="Gamma shape for nu")
    bv: float = Field(default=1.0, gt=0, description="Gamma rate for nu")
    ai: Union[float, List[float]] = Field(default=1.0, description="Gamma shape(s) for 1/lambda_i")
    bi: Union[float, List[float]] = Field(default=1.0, description="Gamma rate(s) for 1/lambda_i")

    @model_validator(mode="after")
    def _check_vectors(self) -> "Hyperparams":
        for name in ("ai", "bi"):
            values = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if values.size == 0 or not np.all(values > 0):
                raise ValueError(f"{name} must be strictly positive")
        return self

    def prior_vectors(self, dim: int) -> Tuple[np.ndarray, np.ndarray]:
        """Expand ai/bi to length-dim arrays (dim = p + 1)."""
        out = []
        for name in ("ai", "bi"):
            values = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if values.size == 1:
                values = np.full(dim, values[0])
            elif values.size != dim:
                raise ValueError(f"{name} has {values.size} entries, expected {dim}")
            out.append(values)
        return out[0], out[1]


class GibbsConfig(BaseModel):
    """Sweep budget and readout for the latent-domain sampler"""
    sweeps: int = Field(default=500, ge=1)
    burn_in: int = Field(default=250, ge=0)
    seed: int = Field(default=0, ge=0)
    partition_rule: PartitionRule = PartitionRule.LAST_SWEEP
    n_chains: int = Field(default=1, ge=1)
    merge_floor: int = Field(default=0, ge=0, description="Merge clusters smaller than this (0 = off)")

    @model_validator(mode="after")
    def _check_burn_in(self) -> "GibbsConfig":
        if self.burn_in >= self.sweeps:
            raise ValueError(f"burn_in ({self.burn_in}) must be < sweeps ({self.sweeps})")
        return self


class TransferConfig(BaseModel):
    """Parameters of the joint-distribution adaptation solver"""
    alpha: float = Field(default=0.5, ge=0, description="Shrink factor for z-scored training y")
    beta: float = Field(default=1.0, ge=0, description="Response-row weight in J")
    mu: float = Field(default=1.0, ge=0, description="Regularization weight")
    tau: float = Field(default=1e-3, ge=0, description="Graph-Laplacian weight (the term grows with N)")
    q: int = Field(default=1, ge=1, description="Output dimension; q = p+1 keeps the response coordinate")
    knn: int = Field(default=5, ge=1)
    jitter: float = Field(default=1e-8, gt=0, description="Relative conditioning jitter on C")


class RunConfig(BaseModel):
    """Everything one pipeline run needs; echoed into the model bundle"""
    train: Optional[str] = None
    test: Optional[str] = None
    response: str = "y"
    split: float = Field(default=0.7, gt=0, le=1, description="Train fraction when no test file")
    split_seed: int = Field(default=0, ge=0)
    mining: MiningMode = MiningMode.DP
    transfer: TransferConfig = Field(default_factory=TransferConfig)
    gibbs: GibbsConfig = Field(default_factory=GibbsConfig)
    hyper: Hyperparams = Field(default_factory=Hyperparams)
    ridge_lambda: float = Field(default=1e-3, ge=0)
    ridge_grid: Optional[List[float]] = None
    repeats: int = Field(default=1, ge=1)


class SynthSpec(BaseModel):
    """Planted latent-domain regression data"""
    atoms: List[List[float]] = Field(
        default=[[2.0, 3.0], [-2.0, -3.0]],
        description="One coefficient vector per domain, intercept first",
    )
    sizes: List[int] = Field(default=[50, 50])
    noise_std: float = Field(default=0.1, ge=0)
    feature_shift: List[Union[float, List[float]]] = Field(
        default_factory=list, description="Per-domain feature mean: a scalar, or one value per feature"
    )
    target_shift: List[float] = Field(default_factory=list, description="Per-feature offset of test instances")
    test_size: int = Field(default=0, ge=0)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_shapes(self) -> "SynthSpec":
        if not self.atoms:
            raise ValueError("at least one atom required")
        dims = {len(a) for a in self.atoms}
        if len(dims) != 1 or dims.pop() < 2:
            raise ValueError("atoms must share one length >= 2 (intercept + features)")
        if len(self.sizes) != len(self.atoms) or any(s < 1 for s in self.sizes):
            raise ValueError("sizes must give a positive count per atom")
        if self.feature_shift and len(self.feature_shift) != len(self.atoms):
            raise ValueError("feature_shift must give one mean per atom")
        for shift in self.feature_shift:
            if isinstance(shift, list) and len(shift) != self.n_features:
                raise ValueError(f"feature_shift vectors need {self.n_features} entries")
        if self.target_shift and len(self.target_shift) != self.n_features:
            raise ValueError(f"target_shift needs {self.n_features} entries")
        return self

    @property
    def n_domains(self) -> int:
        return len(self.atoms)

    @property
    def n_features(self) -> int:
        return len(self.atoms[0]) - 1


class ConfigError(Exception):
    """Unknown or malformed configuration key"""
    pass


SECTION_KEYS = {
    "transfer": set(TransferConfig.model_fields),
    "gibbs": set(GibbsConfig.model_fields),
    "hyper": set(Hyperparams.model_fields),
}
RUN_KEYS = set(RunConfig.model_fields) - set(SECTION_KEYS)
LIST_KEYS = {"ai", "bi", "ridge_grid"}


def normalize_key(key: str) -> str:
    """Config-file and flag spellings both map to field names (burn-in -> burn_in)"""
    return key.strip().lower().lstrip("-").replace("-", "_")


def _parse_list(key: str, value: Any) -> Any:
    if not isinstance(value, str):
        return value
    parts = [part.strip() for part in value.split(",") if part.strip()]
    if not parts:
        raise ConfigError(f"'{key}' is empty")
    if key != "ridge_grid" and len(parts) == 1:
        return parts[0]
    return parts


def build_run_config(flat: Dict[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    """
    Overlay flat key=value settings onto a RunConfig.

    Args:
        flat: Keys named like CLI flags; None values are skipped
        base: Starting configuration (defaults when omitted)

    Raises:
        ConfigError: Unknown key
        pydantic.ValidationError: Value out of range
    """
    data: Dict[str, Any] = base.model_dump() if base else {}
    for raw_key, value in flat.items():
        if value is None:
            continue
        key = normalize_key(raw_key)
        if key in LIST_KEYS:
            value = _parse_list(key, value)
        section = next((name for name, keys in SECTION_KEYS.items() if key in keys), None)
        if section:
            data.setdefault(section, {})[key] = value
        elif key in RUN_KEYS:
            data[key] = value
        else:
            raise ConfigError(f"unknown configuration key '{raw_key}'")
    return RunConfig.model_validate(data)


def settings_digest(cfg: RunConfig) -> str:
    """First 12 hex chars of sha256 over the canonical JSON of cfg"""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
