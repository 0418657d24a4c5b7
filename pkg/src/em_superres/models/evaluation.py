from typing import Any, Optional
from pydantic import Field
from em_superres.base_models import BaseModel


class MetricReport(BaseModel):
    """
    Fidelity of a candidate volume against ground truth.

    Attributes:
        volume_ndp: Normalized dot product of the volumes
        grad_xy_ndp: Normalized dot product of the concatenated (G_x, G_y) fields
        grad_z_ndp: Normalized dot product of the G_z fields
        volume_ndp_centered: volume_ndp after removing each volume's mean
        metadata: Run description (method, SNR, angles, lambda, ...)
    """

    volume_ndp: float = Field(ge=-1.0, le=1.0)
    grad_xy_ndp: float = Field(ge=-1.0, le=1.0)
    grad_z_ndp: float = Field(ge=-1.0, le=1.0)
    volume_ndp_centered: Optional[float] = Field(None, ge=-1.0, le=1.0)
    metadata: dict[str, Any] = Field(default_factory=dict)


class LambdaSweepResult(BaseModel):
    lambdas: list[float]
    reports: list[MetricReport]
    best_lambda: float
