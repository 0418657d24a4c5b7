from typing import Literal, Optional

from typing_extensions import Self
from pydantic import Field, model_validator
from em_superres.base_models import BaseModel
from em_superres.fields import FiniteFloat, FloatTriple, NonNegativeFloat, PositiveFloat, PositiveTriple


class Membrane(BaseModel):
    """
    One curved sheet: the set of voxels r with |(r - point) . normal + bend(r)| <= thickness / 2.

    bend(r) = amplitude * sin(2 pi u / wavelength + phase), where u is the in-plane coordinate of r along the first
    in-plane axis.

    Attributes:
        normal: Unit normal (x, y, z); normalized on use
        point: A point of the undisplaced plane, voxel coordinates (x, y, z)
        amplitude: Bend amplitude in voxels
        wavelength: Bend wavelength in voxels
        phase: Bend phase in radians
    """

    normal: tuple[FiniteFloat, FiniteFloat, FiniteFloat]
    point: tuple[FiniteFloat, FiniteFloat, FiniteFloat]
    amplitude: NonNegativeFloat = 0.0
    wavelength: PositiveFloat = 32.0
    phase: FiniteFloat = 0.0

    @model_validator(mode="after")
    def _check(self) -> Self:
        if sum(component * component for component in self.normal) == 0.0:
            raise ValueError("membrane normal must be nonzero")
        return self


class PhantomSpec(BaseModel):
    """
    Synthetic membrane volume.

    Attributes:
        dims: (nx, ny, nz)
        seed: Seed of the membrane draw
        n_membranes: Number of sheets to draw when ``membranes`` is not given
        thickness_voxels: Sheet thickness
        orientation_mode: "random" (uniform normals), "axis_aligned" (normals along x, y or z) or "mixed"
            (at least ``oblique_fraction`` of the sheets tilted more than 30 degrees from vertical)
        membrane_value: Value inside sheets
        background_value: Value elsewhere
        smoothing_sigma: Gaussian blur in voxels, 0 disables it
        max_amplitude: Largest bend amplitude drawn, at most 3 voxels
        oblique_fraction: Minimum share of oblique sheets in mixed mode
        membranes: Explicit sheets; overrides the random draw
        voxel_size: Voxel size written into the volume
    """

    dims: PositiveTriple = (60, 60, 60)
    seed: int = Field(0, ge=0)
    n_membranes: int = Field(12, ge=0)
    thickness_voxels: PositiveFloat = 2.0
    orientation_mode: Literal["random", "axis_aligned", "mixed"] = "mixed"
    membrane_value: FiniteFloat = 1.0
    background_value: FiniteFloat = 0.0
    smoothing_sigma: NonNegativeFloat = 0.8
    max_amplitude: float = Field(3.0, ge=0.0, le=3.0)
    oblique_fraction: float = Field(0.3, ge=0.3, le=1.0)
    membranes: Optional[list[Membrane]] = None
    voxel_size: FloatTriple = (10.0, 10.0, 10.0)

    @model_validator(mode="after")
    def _check(self) -> Self:
        if not 0.0 <= self.background_value < self.membrane_value:
            raise ValueError(
                f"need 0 <= background_value < membrane_value, got {self.background_value}, {self.membrane_value}"
            )
        return self
