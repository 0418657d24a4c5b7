from typing import Any, Literal, Optional

from typing_extensions import Self
from pydantic import Field, field_validator, model_validator
from em_superres.base_models import ArrayModel, BaseModel, frozen_array
from em_superres.fields import NonNegativeFloat, PositiveInt, PositiveTriple
from em_superres.models.volume import Volume3D
import numpy as np


class ReconConfig(BaseModel):
    """
    Settings of the two reconstruction steps.

    Attributes:
        lambda_recover: lambda of the per-patch recovery from measurements
        lambda_smooth: lambda of the dense re-coding of the recovered volume
        lambda_units: "volume" multiplies lambda_recover by the mean squared column norm of the valid rows of P D
            of each patch, "measurement" uses lambda_recover unscaled
        recover_stride: Patch lattice stride of the recovery step, z a multiple of L
        smooth_stride: Patch lattice stride of the smoothing step
        smooth_enabled: Run the smoothing step
        single_view: Use the normal view only
        min_valid_fraction: Patches with fewer valid measurement rows than this fraction of m are skipped
        max_iter: Solver sweep cap
        tol: Solver stopping tolerance
    """

    lambda_recover: NonNegativeFloat = 0.1
    lambda_smooth: NonNegativeFloat = 0.1
    lambda_units: Literal["volume", "measurement"] = "volume"
    recover_stride: PositiveTriple = (1, 1, 5)
    smooth_stride: PositiveTriple = (1, 1, 1)
    smooth_enabled: bool = True
    single_view: bool = False
    min_valid_fraction: float = Field(0.1, ge=0.0, le=1.0)
    max_iter: PositiveInt = 1000
    tol: float = Field(1e-7, gt=0.0)


class FoldDetectConfig(BaseModel):
    """
    Fold detection settings.

    Attributes:
        n_sigma: Threshold distance from the mean in standard deviations
        closing_size: Side of the square structuring element of the closing
        closing_iterations: Dilation and erosion iterations
        min_region: Non-fold components smaller than this are absorbed into the mask
        min_fold: Fold components smaller than this are dropped as dust
        reversed_contrast: Folds are bright (display convention) instead of dark
    """

    n_sigma: float = Field(4.0, gt=0.0)
    closing_size: PositiveInt = 3
    closing_iterations: PositiveInt = 1
    min_region: int = Field(64, ge=0)
    min_fold: int = Field(16, ge=0)
    reversed_contrast: bool = False


class FoldMask(ArrayModel):
    """
    Per-section occlusion mask, True marks a fold (or lost) pixel.

    Attributes:
        masks: (n_sections, ny, nx) boolean array
    """

    masks: np.ndarray = Field(repr=False)

    @field_validator("masks", mode="before")
    @classmethod
    def _freeze(cls, value: Any) -> np.ndarray:
        return frozen_array(value, dtype=bool)

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.masks.ndim != 3:
            raise ValueError(f"fold masks must be (sections, ny, nx), got {self.masks.shape}")
        return self

    @classmethod
    def empty(cls, n_sections: int, ny: int, nx: int) -> "FoldMask":
        return cls(masks=np.zeros((n_sections, ny, nx), dtype=bool))

    @property
    def n_sections(self) -> int:
        return self.masks.shape[0]

    @property
    def lateral_dims(self) -> tuple[int, int]:
        """(nx, ny)"""
        return self.masks.shape[2], self.masks.shape[1]

    def any(self) -> bool:
        return bool(self.masks.any())


class ReconReport(BaseModel):
    """
    What happened during a reconstruction run.
    """

    patches_total: int = 0
    patches_skipped: int = 0
    skipped_origins: list[tuple[int, int, int]] = Field(default_factory=list)
    uncovered_voxels: int = 0
    nonconverged: int = 0
    smooth_patches: int = 0


class ReconstructionResult(ArrayModel):
    volume: Volume3D
    report: ReconReport
    coverage_flag: Optional[np.ndarray] = Field(None, repr=False)

    @property
    def has_warnings(self) -> bool:
        return bool(self.report.patches_skipped or self.report.uncovered_voxels or self.report.nonconverged)
