from pathlib import Path
from em_superres.helpers import PathLike, sidecar_paths, write_json
from em_superres.models import Membrane, PhantomSpec, Volume3D
from em_superres.volume import write_volume
from scipy import ndimage
import numpy as np
import logging
import math

logger = logging.getLogger("em_superres_phantom")

# oblique sheets tilt their plane this far (degrees) from vertical
OBLIQUE_RANGE = (35.0, 80.0)
WAVELENGTH_RANGE = (16.0, 48.0)


def _unit(vector: np.ndarray) -> np.ndarray:
    return vector / np.linalg.norm(vector)


def _random_normal(rng: np.random.Generator) -> np.ndarray:
    while True:
        vector = rng.standard_normal(3)
        norm = np.linalg.norm(vector)
        if norm > 1e-12:
            return vector / norm


def _oblique_normal(rng: np.random.Generator) -> np.ndarray:
    elevation = math.radians(rng.uniform(*OBLIQUE_RANGE))
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    return np.array(
        [math.cos(elevation) * math.cos(azimuth), math.cos(elevation) * math.sin(azimuth), math.sin(elevation)]
    )


def draw_membranes(spec: PhantomSpec) -> list[Membrane]:
    """
    Membranes of a phantom: ``spec.membranes`` when given, otherwise ``n_membranes`` sheets drawn from the seed.

    In mixed mode the first ceil(oblique_fraction * n) sheets are oblique (plane more than 30 degrees from
    vertical, i.e. |normal_z| > 0.5) and the others have uniformly random orientation.
    """

    if spec.membranes is not None:
        return list(spec.membranes)

    rng = np.random.default_rng(spec.seed)
    oblique = math.ceil(spec.oblique_fraction * spec.n_membranes) if spec.orientation_mode == "mixed" else 0
    membranes = []

    for index in range(spec.n_membranes):
        if spec.orientation_mode == "axis_aligned":
            normal = np.eye(3)[rng.integers(3)]
        elif index < oblique:
            normal = _oblique_normal(rng)
        else:
            normal = _random_normal(rng)

        point = rng.uniform(0.0, 1.0, size=3) * (np.asarray(spec.dims, dtype=np.float64) - 1.0)
        membranes.append(
            Membrane(
                normal=tuple(normal.tolist()),
                point=tuple(point.tolist()),
                amplitude=rng.uniform(0.0, spec.max_amplitude),
                wavelength=rng.uniform(*WAVELENGTH_RANGE),
                phase=rng.uniform(0.0, 2.0 * math.pi),
            )
        )

    return membranes


def rasterize_membrane(membrane: Membrane, dims: tuple[int, int, int], thickness: float) -> np.ndarray:
    """
    Boolean (nz, ny, nx) slab of one membrane on the voxel-center lattice.
    """

    nx, ny, nz = dims
    normal = _unit(np.asarray(membrane.normal, dtype=np.float64))
    helper = np.array([0.0, 0.0, 1.0]) if abs(normal[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    in_plane = _unit(np.cross(normal, helper))

    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    offset = np.stack([x - membrane.point[0], y - membrane.point[1], z - membrane.point[2]], axis=-1)
    distance = offset @ normal
    bend = membrane.amplitude * np.sin(2.0 * math.pi * (offset @ in_plane) / membrane.wavelength + membrane.phase)
    return np.abs(distance + bend) <= thickness / 2.0


def generate_phantom(spec: PhantomSpec) -> Volume3D:
    """
    Synthetic membrane volume: curved slabs at membrane_value over background_value, blurred and clamped to
    [background_value, membrane_value]. Deterministic given ``spec``.
    """

    nx, ny, nz = spec.dims
    data = np.full((nz, ny, nx), spec.background_value, dtype=np.float64)
    membranes = draw_membranes(spec)

    for membrane in membranes:
        data[rasterize_membrane(membrane, spec.dims, spec.thickness_voxels)] = spec.membrane_value

    if spec.smoothing_sigma > 0.0:
        data = ndimage.gaussian_filter(data, sigma=spec.smoothing_sigma, mode="nearest")
    data = np.clip(data, spec.background_value, spec.membrane_value)

    logger.debug(f"Generated phantom {spec.dims} with {len(membranes)} membranes (seed {spec.seed})")
    return Volume3D(dims=spec.dims, voxel_size=spec.voxel_size, data=data)


def write_phantom(volume: Volume3D, spec: PhantomSpec, path: PathLike) -> tuple[Path, Path, Path]:
    """
    Write the phantom volume (VV1) and its spec as ``<stem>.spec.json``.
    """

    json_path, raw_path = write_volume(volume, path)
    stem = sidecar_paths(path)[0].with_suffix("")
    spec_path = write_json(stem.with_name(f"{stem.name}.spec.json"), spec.model_dump(mode="json", by_alias=True))
    return json_path, raw_path, spec_path
