from pydantic import BaseModel, Field, field_validator, model_validator
from typing import List, Optional

from models.config import RunConfig

BUNDLE_FORMAT_VERSION = 1


class ScalerRecord(BaseModel):
    """Training z-score statistics"""
    means: List[float]
    stds: List[float]
    names: List[str]
    response_mean: Optional[float] = None
    response_std: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _check_lengths(self) -> "ScalerRecord":
        if not (len(self.means) == len(self.stds) == len(self.names)):
            raise ValueError("means, stds and names must have equal length")
        if any(s <= 0 for s in self.stds):
            raise ValueError("stds must be strictly positive")
        return self


class PartitionSummary(BaseModel):
    """Latent domains mined from the training data"""
    labels: List[int] = Field(..., description="Latent domain (1..m) of each training instance")
    sizes: List[int]
    atoms: List[List[float]] = Field(..., description="Coefficient vector per domain, intercept first")

    @model_validator(mode="after")
    def _check_counts(self) -> "PartitionSummary":
        if len(self.sizes) != len(self.atoms):
            raise ValueError("one size per atom required")
        if sum(self.sizes) != len(self.labels):
            raise ValueError("sizes must sum to the number of labels")
        return self


class AffineMapRecord(BaseModel):
    B: List[List[float]]
    q: int = Field(..., ge=1)
    input_semantics: List[str]
    eigvals: List[float]
    jitter: float = Field(..., ge=0)

    @model_validator(mode="after")
    def _check_shape(self) -> "AffineMapRecord":
        if len(self.B) != len(self.input_semantics) or any(len(row) != self.q for row in self.B):
            raise ValueError("B must be (p+1) x q with one semantic label per row")
        return self


class RidgeRecord(BaseModel):
    weights: List[float]
    intercept: float
    ridge_lambda: float = Field(..., ge=0)


class ModelBundle(BaseModel):
    """Everything needed to reproduce predictions from a fitted pipeline"""
    format_version: int = BUNDLE_FORMAT_VERSION
    scaler: ScalerRecord
    partition: PartitionSummary
    affine_map: AffineMapRecord
    ridge: RidgeRecord
    config: RunConfig

    @field_validator("format_version")
    @classmethod
    def _check_version(cls, value: int) -> int:
        if value != BUNDLE_FORMAT_VERSION:
            raise ValueError(f"bundle format version {value} is not supported (expected {BUNDLE_FORMAT_VERSION})")
        return value

    @model_validator(mode="after")
    def _check_dimensions(self) -> "ModelBundle":
        if len(self.affine_map.B) != len(self.scaler.means) + 1:
            raise ValueError("affine map rows must equal feature count + 1")
        if len(self.ridge.weights) != self.affine_map.q:
            raise ValueError("ridge weights must match the map's output dimension")
        return self
