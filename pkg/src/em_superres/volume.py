from typing import Optional, Sequence
from pathlib import Path
from em_superres.exceptions import (
    CoverageGapError,
    DimensionTooSmallError,
    MalformedHeaderError,
    NonFiniteValueError,
    ShapeMismatchError,
)
from em_superres.helpers import PathLike, lattice, read_header, read_raw, sidecar_paths, write_json, write_raw
from em_superres.models import PatchBatch, PatchSpec, Volume3D
from pydantic import ValidationError
import numpy as np
import logging

logger = logging.getLogger("em_superres_volume")

VOLUME_FORMAT = "VV1"


def patch_origins(dims: tuple[int, int, int], spec: PatchSpec) -> np.ndarray:
    """
    Patch lattice of a volume in ascending (z, y, x) order.

    Every axis enumerates 0, s, 2s, ... and always ends with a patch flush with the far boundary.

    Args:
        dims: (nx, ny, nz) of the volume
        spec: Patch geometry and stride

    Returns:
        (count, 3) array of (x, y, z) origins
    """

    small = [axis for axis, dim, extent in zip("xyz", dims, spec.extent) if dim < extent]
    if small:
        raise DimensionTooSmallError(f"volume dims {tuple(dims)} are below patch extent {spec.extent} on {small}")

    xs, ys, zs = (lattice(dim, extent, stride) for dim, extent, stride in zip(dims, spec.extent, spec.stride))
    grid_z, grid_y, grid_x = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([grid_x.ravel(), grid_y.ravel(), grid_z.ravel()], axis=1)


def sort_origins(origins: np.ndarray) -> np.ndarray:
    """
    Permutation that puts (x, y, z) origins in ascending (z, y, x) order.
    """

    return np.lexsort((origins[:, 0], origins[:, 1], origins[:, 2]))


def gather_columns(data: np.ndarray, spec: PatchSpec, origins: np.ndarray) -> np.ndarray:
    """
    Copy the patches at ``origins`` out of a (nz, ny, nx) array as an (n, count) matrix.
    """

    v, h, _ = spec.shape
    windows = np.lib.stride_tricks.sliding_window_view(data, (v, h, h))
    patches = windows[origins[:, 2], origins[:, 1], origins[:, 0]]
    return np.ascontiguousarray(patches.reshape(len(origins), spec.n).T)


def extract_patches(volume: Volume3D, spec: PatchSpec, origins: Optional[np.ndarray] = None) -> PatchBatch:
    """
    Extract every patch of the stride lattice (or the given origins) from a volume.

    Args:
        volume: Source volume
        spec: Patch geometry and stride
        origins: Optional explicit (count, 3) origins, used instead of the lattice
    """

    if origins is None:
        origins = patch_origins(volume.dims, spec)
    else:
        small = [axis for axis, dim, extent in zip("xyz", volume.dims, spec.extent) if dim < extent]
        if small:
            raise DimensionTooSmallError(f"volume dims {volume.dims} are smaller than patch extent {spec.extent}")
        origins = np.asarray(origins, dtype=np.int64).reshape(-1, 3)

    matrix = gather_columns(volume.data, spec, origins)
    logger.debug(f"Extracted {len(origins)} patches of {spec.extent} with stride {spec.stride}")

    return PatchBatch(spec=spec, source_dims=volume.dims, origins=origins, matrix=matrix)


class PatchAccumulator:
    """
    Running per-voxel sums of patch values and patch counts.

    Patches must be added in ascending (z, y, x) origin order; ``recompose_average`` and the reconstruction
    pipeline both feed patches in that order, so the sums, and therefore the averages, are bit-reproducible.
    """

    def __init__(self, dims: tuple[int, int, int], spec: PatchSpec):
        nx, ny, nz = dims
        self.dims = tuple(dims)
        self.spec = spec
        self.sums = np.zeros((nz, ny, nx), dtype=np.float64)
        self.counts = np.zeros((nz, ny, nx), dtype=np.int64)
        self._last: Optional[tuple[int, int, int]] = None

    def add(self, origins: np.ndarray, columns: np.ndarray) -> None:
        """
        Args:
            origins: (count, 3) (x, y, z) origins, ascending in (z, y, x)
            columns: (n, count) patch values
        """

        v, h, _ = self.spec.shape
        upper = np.asarray(self.dims) - np.asarray(self.spec.extent)
        if len(origins) and (np.any(origins < 0) or np.any(origins > upper)):
            raise ShapeMismatchError(f"patch origins exceed the output volume {self.dims}")

        for index, (x, y, z) in enumerate(origins):
            key = (int(z), int(y), int(x))
            if self._last is not None and key < self._last:
                raise ValueError(f"origins must be added in ascending (z, y, x) order, got {key} after {self._last}")
            self._last = key
            self.sums[z : z + v, y : y + h, x : x + h] += columns[:, index].reshape(v, h, h)
            self.counts[z : z + v, y : y + h, x : x + h] += 1

    def uncovered(self) -> np.ndarray:
        return self.counts == 0

    def average(self, *, fill: Optional[float] = None) -> np.ndarray:
        """
        Per-voxel mean. Uncovered voxels raise a CoverageGapError unless ``fill`` is given.
        """

        uncovered = self.uncovered()
        if uncovered.any() and fill is None:
            zs, ys, xs = np.nonzero(uncovered)
            listed = list(zip(xs.tolist(), ys.tolist(), zs.tolist()))
            raise CoverageGapError(f"{len(listed)} voxels are not covered by any patch, first (x, y, z): {listed[:10]}")

        result = np.divide(self.sums, np.maximum(self.counts, 1))
        if fill is not None:
            result[uncovered] = fill
        return result


def recompose_average(
    batch: PatchBatch, dims: tuple[int, int, int], voxel_size: tuple[float, float, float] = (10.0, 10.0, 10.0)
) -> Volume3D:
    """
    Rebuild a volume where every voxel is the mean of the patch columns covering it.

    Origins are sorted into ascending (z, y, x) order before accumulation, so any permutation of the batch gives a
    bit-identical result.

    Args:
        batch: Patches to average
        dims: (nx, ny, nz) of the output
        voxel_size: Voxel size of the output
    """

    order = sort_origins(batch.origins)
    accumulator = PatchAccumulator(dims, batch.spec)
    accumulator.add(batch.origins[order], batch.matrix[:, order])
    return Volume3D(dims=dims, voxel_size=voxel_size, data=accumulator.average())


def center_patches(batch: PatchBatch) -> tuple[PatchBatch, np.ndarray]:
    """
    Remove the mean of every patch column. Returns the centered batch and the removed means.
    """

    means = batch.matrix.mean(axis=0)
    centered = PatchBatch(
        spec=batch.spec, source_dims=batch.source_dims, origins=batch.origins, matrix=batch.matrix - means[None, :]
    )
    return centered, means


def rescale_unit(volume: Volume3D) -> Volume3D:
    """
    Linearly map the volume range onto [0, 1]. A constant volume maps to zeros.
    """

    low, high = float(volume.data.min()), float(volume.data.max())
    if high == low:
        return Volume3D(dims=volume.dims, voxel_size=volume.voxel_size, data=np.zeros_like(volume.data))
    return Volume3D(dims=volume.dims, voxel_size=volume.voxel_size, data=(volume.data - low) / (high - low))


def read_volume(path: PathLike) -> Volume3D:
    """
    Read a VV1 volume (``<name>.json`` header plus ``<name>.raw`` little-endian float32 payload).
    """

    json_path, raw_path = sidecar_paths(path)
    header = read_header(json_path, format_=VOLUME_FORMAT, required=("dims", "voxel_size_nm", "dtype", "byte_order"))

    if header["dtype"] != "f32" or header["byte_order"] != "little":
        raise MalformedHeaderError(f"Unsupported payload {header['dtype']}/{header['byte_order']} in {json_path}")

    dims = header["dims"]
    if not isinstance(dims, list) or len(dims) != 3 or not all(isinstance(dim, int) for dim in dims):
        raise MalformedHeaderError(f"Header dims must be three integers, got {dims!r}")

    if any(dim < 1 for dim in dims):
        raise MalformedHeaderError(f"Header dims must be >= 1, got {dims}")

    count = dims[0] * dims[1] * dims[2]
    values = read_raw(raw_path, dtype="<f4", count=count).astype(np.float64)

    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError(f"Payload {raw_path} contains non-finite values")

    try:
        return Volume3D(dims=tuple(dims), voxel_size=tuple(header["voxel_size_nm"]), data=values)
    except ValidationError as exc:
        raise MalformedHeaderError(f"Invalid volume header {json_path}: {exc}") from exc


def write_volume(volume: Volume3D, path: PathLike) -> tuple[Path, Path]:
    """
    Write a VV1 volume. Values are stored as float32.
    """

    json_path, raw_path = sidecar_paths(path)
    write_raw(raw_path, volume.flat(), dtype="<f4")
    write_json(
        json_path,
        {
            "format": VOLUME_FORMAT,
            "dims": list(volume.dims),
            "voxel_size_nm": list(volume.voxel_size),
            "dtype": "f32",
            "byte_order": "little",
        },
    )
    logger.info(f"Wrote volume {volume.dims} to {raw_path}")
    return json_path, raw_path


def import_stack(paths: Sequence[PathLike], voxel_size: tuple[float, float, float] = (10.0, 10.0, 10.0)) -> Volume3D:
    """
    Stack 2D ``.npy`` slices (each (ny, nx)) along z into a volume.
    """

    slices = [np.load(Path(path)) for path in paths]
    if not slices:
        raise ShapeMismatchError("No slices to import")
    shapes = {image.shape for image in slices}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ShapeMismatchError(f"Slices must share one 2D shape, got {sorted(shapes)}")
    return Volume3D.from_array(np.stack(slices, axis=0).astype(np.float64), voxel_size=voxel_size)

