from typing import Any, Optional

from typing_extensions import Self
from enum import Enum
from pydantic import Field, field_validator, model_validator
from em_superres.base_models import ArrayModel, BaseModel, frozen_array
from em_superres.exceptions import MissingAngleError
from em_superres.fields import PositiveInt, SnrDb
import scipy.sparse as sp
import numpy as np
import math


class Angle(Enum):
    Normal = "normal"
    PlusX = "+45x"
    MinusX = "-45x"
    PlusY = "+45y"
    MinusY = "-45y"

    @property
    def is_tilt(self) -> bool:
        return self is not Angle.Normal


ALL_ANGLES = (Angle.Normal, Angle.PlusX, Angle.MinusX, Angle.PlusY, Angle.MinusY)


class TiltGeometry(BaseModel):
    """
    Section-wise imaging geometry of a h x h x v patch.

    Attributes:
        layers_per_section: Voxel layers L in one physical section
        angles: Views taken of every section, in measurement order
        h: Lateral patch side
        v: Axial patch extent, a multiple of L
    """

    layers_per_section: PositiveInt = 5
    angles: tuple[Angle, ...] = ALL_ANGLES
    h: PositiveInt = 9
    v: PositiveInt = 15

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.v % self.layers_per_section:
            raise ValueError(f"v = {self.v} is not a multiple of layers_per_section = {self.layers_per_section}")
        if not self.angles:
            raise ValueError("at least one angle is required")
        if len(set(self.angles)) != len(self.angles):
            raise ValueError(f"angles must not repeat: {[angle.value for angle in self.angles]}")
        return self

    @property
    def sections_per_patch(self) -> int:
        return self.v // self.layers_per_section

    @property
    def n(self) -> int:
        return self.h * self.h * self.v

    def with_angles(self, angles: tuple[Angle, ...]) -> "TiltGeometry":
        return self.model_copy(update={"angles": tuple(angles)})


class ProjectionModel(ArrayModel):
    """
    Sparse operator P mapping a vectorized patch to its tilt-view measurements.

    Row r averages the L voxels of one ray. ``row_section``, ``row_angle`` (index into geometry.angles) and
    ``row_pixel`` ((x, y) image pixel relative to the patch origin) identify the image pixel each row reads.
    """

    geometry: TiltGeometry
    matrix: sp.csr_matrix = Field(repr=False)
    row_section: np.ndarray
    row_angle: np.ndarray
    row_pixel: np.ndarray

    @field_validator("row_section", "row_angle", mode="before")
    @classmethod
    def _freeze_index(cls, value: Any) -> np.ndarray:
        return frozen_array(value, dtype=np.int64)

    @field_validator("row_pixel", mode="before")
    @classmethod
    def _freeze_pixel(cls, value: Any) -> np.ndarray:
        return frozen_array(np.reshape(value, (-1, 2)), dtype=np.int64)

    @model_validator(mode="after")
    def _check(self) -> Self:
        rows, cols = self.matrix.shape
        if cols != self.geometry.n:
            raise ValueError(f"operator has {cols} columns, expected n = {self.geometry.n}")
        if not (self.row_section.shape[0] == self.row_angle.shape[0] == self.row_pixel.shape[0] == rows):
            raise ValueError("row index arrays must have one entry per operator row")
        per_row = np.diff(self.matrix.indptr)
        if np.any(per_row != self.geometry.layers_per_section):
            raise ValueError("every row must touch exactly layers_per_section voxels")
        return self

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        (row, col, weight) triplets
        """

        coo = self.matrix.tocoo()
        return coo.row, coo.col, coo.data

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


class NoiseSpec(BaseModel):
    """
    Gaussian measurement noise: sigma = std(valid pixels) * 10^(-snr_db / 20). snr_db = +inf is noiseless.
    """

    snr_db: SnrDb = math.inf
    seed: int = Field(0, ge=0)


class TiltViewSet(ArrayModel):
    """
    Projection images of every section under every angle.

    Attributes:
        angles: Angle of each image column
        images: (n_sections, n_angles, ny, nx) pixel values; invalid pixels hold 0.0
        masks: Same shape, True where the pixel is a valid measurement
        layers_per_section: L used to form the views
        voxel_size: Voxel size of the source volume
        snr_db: Noise level applied, +inf when noiseless
        noise_sigma: Absolute noise standard deviation applied
        noise_seed: Seed used for the noise, if any
    """

    angles: tuple[Angle, ...]
    images: np.ndarray = Field(repr=False)
    masks: np.ndarray = Field(repr=False)
    layers_per_section: PositiveInt = 5
    voxel_size: tuple[float, float, float] = (10.0, 10.0, 10.0)
    snr_db: float = math.inf
    noise_sigma: float = 0.0
    noise_seed: Optional[int] = None

    @field_validator("images", mode="before")
    @classmethod
    def _freeze_images(cls, value: Any) -> np.ndarray:
        return frozen_array(value)

    @field_validator("masks", mode="before")
    @classmethod
    def _freeze_masks(cls, value: Any) -> np.ndarray:
        return frozen_array(value, dtype=bool)

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.images.ndim != 4:
            raise ValueError(f"images must be (sections, angles, ny, nx), got {self.images.shape}")
        if self.images.shape[1] != len(self.angles):
            raise ValueError(f"{self.images.shape[1]} image columns for {len(self.angles)} angles")
        if self.masks.shape != self.images.shape:
            raise ValueError(f"mask shape {self.masks.shape} differs from image shape {self.images.shape}")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("view images must be finite")
        return self

    @property
    def n_sections(self) -> int:
        return self.images.shape[0]

    @property
    def lateral_dims(self) -> tuple[int, int]:
        """(nx, ny)"""
        return self.images.shape[3], self.images.shape[2]

    def angle_index(self, angle: Angle) -> int:
        try:
            return self.angles.index(angle)
        except ValueError:
            present = [value.value for value in self.angles]
            raise MissingAngleError(f"views do not contain the {angle.value} angle, they have {present}") from None

    def image(self, section: int, angle: Angle) -> np.ndarray:
        return self.images[section, self.angle_index(angle)]

    def mask(self, section: int, angle: Angle) -> np.ndarray:
        return self.masks[section, self.angle_index(angle)]

    def replace(self, **changes) -> "TiltViewSet":
        values = {name: getattr(self, name) for name in type(self).model_fields}
        values.update(changes)
        return TiltViewSet(**values)
