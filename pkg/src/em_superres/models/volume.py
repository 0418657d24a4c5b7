from typing import Any

from typing_extensions import Self
from pydantic import Field, field_validator, model_validator
from em_superres.base_models import ArrayModel, BaseModel, frozen_array
from em_superres.fields import FloatTriple, PositiveInt, PositiveTriple
import numpy as np


class Volume3D(ArrayModel):
    """
    Dense scalar field on a regular voxel grid.

    ``data`` is stored as a C-ordered array of shape (nz, ny, nx), so ``data.ravel()`` enumerates voxels x-fastest,
    then y, then z: index = x + nx * y + nx * ny * z. A flat payload of nx * ny * nz values is accepted and reshaped.

    Attributes:
        dims: Voxel counts (nx, ny, nz)
        voxel_size: Voxel edge lengths (dx, dy, dz) in nanometers, informational only
        data: Voxel values, float64
    """

    dims: PositiveTriple
    voxel_size: FloatTriple = (10.0, 10.0, 10.0)
    data: np.ndarray

    @model_validator(mode="before")
    @classmethod
    def _shape_data(cls, values: Any) -> Any:
        if isinstance(values, dict) and "data" in values:
            data = np.asarray(values["data"], dtype=np.float64)
            dims = values.get("dims")
            if dims is None and data.ndim == 3:
                values = {**values, "dims": (data.shape[2], data.shape[1], data.shape[0])}
            elif dims is not None and data.ndim == 1:
                nx, ny, nz = dims
                if data.size != nx * ny * nz:
                    raise ValueError(f"data length {data.size} does not match dims {tuple(dims)}")
                values = {**values, "data": data.reshape(nz, ny, nx)}
        return values

    @field_validator("data", mode="before")
    @classmethod
    def _freeze(cls, value: Any) -> np.ndarray:
        return frozen_array(value)

    @model_validator(mode="after")
    def _check(self) -> Self:
        nx, ny, nz = self.dims
        if self.data.shape != (nz, ny, nx):
            raise ValueError(f"data shape {self.data.shape} does not match dims {self.dims} (expected (nz, ny, nx))")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume values must be finite")
        return self

    @classmethod
    def from_array(cls, array: np.ndarray, voxel_size: tuple[float, float, float] = (10.0, 10.0, 10.0)) -> "Volume3D":
        """
        Wrap a (nz, ny, nx) array.
        """

        return cls(data=array, voxel_size=voxel_size)

    @property
    def nx(self) -> int:
        return self.dims[0]

    @property
    def ny(self) -> int:
        return self.dims[1]

    @property
    def nz(self) -> int:
        return self.dims[2]

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        return self.data.ravel()

    def index(self, x: int, y: int, z: int) -> int:
        return x + self.nx * y + self.nx * self.ny * z

    def coords(self, index: int) -> tuple[int, int, int]:
        z, rest = divmod(index, self.nx * self.ny)
        y, x = divmod(rest, self.nx)
        return x, y, z


class PatchSpec(BaseModel):
    """
    Patch geometry: lateral side h, axial extent v and the lattice stride (sx, sy, sz).

    Vectorized patches have length n = h * h * v and use the same x-fastest ordering as Volume3D.
    """

    h: PositiveInt = 9
    v: PositiveInt = 15
    stride: PositiveTriple = (4, 4, 10)

    @model_validator(mode="after")
    def _check(self) -> Self:
        sx, sy, sz = self.stride
        if sx > self.h or sy > self.h or sz > self.v:
            raise ValueError(f"stride {self.stride} exceeds patch extent {self.extent}")
        return self

    @property
    def n(self) -> int:
        return self.h * self.h * self.v

    @property
    def extent(self) -> tuple[int, int, int]:
        """(x, y, z) extent"""
        return self.h, self.h, self.v

    @property
    def shape(self) -> tuple[int, int, int]:
        """(z, y, x) array shape of one patch"""
        return self.v, self.h, self.h

    @property
    def overlap(self) -> tuple[int, int, int]:
        return tuple(extent - stride for extent, stride in zip(self.extent, self.stride))

    def with_stride(self, stride: tuple[int, int, int]) -> "PatchSpec":
        return PatchSpec(h=self.h, v=self.v, stride=stride)


class PatchBatch(ArrayModel):
    """
    A set of vectorized patches, one column per patch.

    Attributes:
        spec: Geometry of the patches
        source_dims: (nx, ny, nz) of the volume the origins refer to
        origins: (count, 3) integer array of (x, y, z) origins
        matrix: (n, count) patch values
    """

    spec: PatchSpec
    source_dims: PositiveTriple
    origins: np.ndarray
    matrix: np.ndarray = Field(repr=False)

    @field_validator("origins", mode="before")
    @classmethod
    def _freeze_origins(cls, value: Any) -> np.ndarray:
        return frozen_array(np.reshape(value, (-1, 3)), dtype=np.int64)

    @field_validator("matrix", mode="before")
    @classmethod
    def _freeze_matrix(cls, value: Any) -> np.ndarray:
        return frozen_array(value)

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.spec.n:
            raise ValueError(f"matrix shape {self.matrix.shape} does not have {self.spec.n} rows")
        if self.matrix.shape[1] != self.origins.shape[0]:
            raise ValueError(f"{self.matrix.shape[1]} columns but {self.origins.shape[0]} origins")
        if self.origins.size:
            upper = np.asarray(self.source_dims) - np.asarray(self.spec.extent)
            if np.any(self.origins < 0) or np.any(self.origins > upper):
                raise ValueError(f"patch origins exceed the source volume {self.source_dims}")
        return self

    @property
    def count(self) -> int:
        return self.origins.shape[0]
