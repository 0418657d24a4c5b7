"""
Section-wise tilt-view imaging.

Every section of L voxel layers is imaged under a few angles. The normal view averages the L voxels below each
pixel; a 45 degree view averages one voxel per layer along a voxel diagonal, so a ray anchored at pixel (x, y) moves
one voxel sideways per layer. Views are registered: a tilt pixel sits at the lateral position of its anchor.
"""

from typing import Optional, Sequence
from pathlib import Path
from em_superres.exceptions import (
    ConfigurationError,
    DegenerateDataError,
    MalformedHeaderError,
    NonFiniteValueError,
    OriginOutOfRangeError,
    ShapeMismatchError,
)
from em_superres.helpers import PathLike, read_bitmask, read_header, read_raw, write_bitmask, write_json, write_raw
from em_superres.models import Angle, NoiseSpec, ProjectionModel, TiltGeometry, TiltViewSet, Volume3D
from pydantic import ValidationError
import scipy.sparse as sp
import numpy as np
import logging
import math

logger = logging.getLogger("em_superres_tomography")

VIEWS_FORMAT = "TV1"
MANIFEST_NAME = "views.json"


def ray_offsets(angle: Angle, layers: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Lateral (dx, dy) offsets of a ray from its anchor pixel at local layers 0..L-1.
    """

    steps = np.arange(layers, dtype=np.int64)
    still = np.zeros(layers, dtype=np.int64)
    match angle:
        case Angle.Normal:
            return still, still
        case Angle.PlusX:
            return still, steps
        case Angle.MinusX:
            return still, layers - 1 - steps
        case Angle.PlusY:
            return steps, still
        case Angle.MinusY:
            return layers - 1 - steps, still


def anchor_extent(angle: Angle, layers: int, nx: int, ny: int) -> tuple[int, int]:
    """
    Number of anchors (along x, along y) whose ray stays inside an nx x ny footprint.
    """

    dx, dy = ray_offsets(angle, layers)
    return max(nx - int(dx.max()), 0), max(ny - int(dy.max()), 0)


def build_projection_model(geometry: TiltGeometry) -> ProjectionModel:
    """
    Sparse operator from a vectorized h x h x v patch to its tilt-view measurements.

    Only rays whose L voxels all lie inside the patch become rows. Rows are ordered by section, then by the order
    of ``geometry.angles``, then by anchor pixel y-major, x-minor. Every row holds weight 1/L on each ray voxel.

    Args:
        geometry: Patch extents, layers per section and angles

    Returns:
        ProjectionModel with the CSR operator and its row index
    """

    h, layers = geometry.h, geometry.layers_per_section
    column_blocks, sections, angles, pixels = [], [], [], []

    for section in range(geometry.sections_per_patch):
        for angle_index, angle in enumerate(geometry.angles):
            dx, dy = ray_offsets(angle, layers)
            count_x, count_y = anchor_extent(angle, layers, h, h)
            if count_x == 0 or count_y == 0:
                continue

            ys, xs = np.meshgrid(np.arange(count_y), np.arange(count_x), indexing="ij")
            xs, ys = xs.ravel(), ys.ravel()
            z = section * layers + np.arange(layers)
            columns = (xs[:, None] + dx[None, :]) + h * (ys[:, None] + dy[None, :]) + h * h * z[None, :]

            column_blocks.append(columns)
            sections.append(np.full(xs.size, section, dtype=np.int64))
            angles.append(np.full(xs.size, angle_index, dtype=np.int64))
            pixels.append(np.stack([xs, ys], axis=1))

    if not column_blocks:
        raise ShapeMismatchError(f"patch side h = {h} is too small for any ray of L = {layers} layers")

    columns = np.concatenate(column_blocks)
    rows = columns.shape[0]
    matrix = sp.csr_matrix(
        (np.full(rows * layers, 1.0 / layers), columns.ravel(), np.arange(0, rows * layers + 1, layers)),
        shape=(rows, geometry.n),
    )
    logger.debug(f"Projection model {rows} x {geometry.n} for angles {[angle.value for angle in geometry.angles]}")

    return ProjectionModel(
        geometry=geometry,
        matrix=matrix,
        row_section=np.concatenate(sections),
        row_angle=np.concatenate(angles),
        row_pixel=np.concatenate(pixels),
    )


def simulate_views(
    volume: Volume3D,
    geometry: TiltGeometry,
    noise: Optional[NoiseSpec] = None,
) -> TiltViewSet:
    """
    Image every section of a volume under every angle of the geometry.

    Pixels whose ray leaves the lateral bounds of the volume are invalid and hold 0.0. Noise, if requested, is
    added after projection.

    Args:
        volume: Source volume; nz must be a multiple of layers_per_section
        geometry: Layers per section and angles (patch extents are not used)
        noise: Optional measurement noise
    """

    layers = geometry.layers_per_section
    if volume.nz % layers:
        raise ShapeMismatchError(f"volume depth {volume.nz} is not a multiple of layers_per_section = {layers}")

    n_sections = volume.nz // layers
    images = np.zeros((n_sections, len(geometry.angles), volume.ny, volume.nx), dtype=np.float64)
    masks = np.zeros(images.shape, dtype=bool)
    data = volume.data

    for angle_index, angle in enumerate(geometry.angles):
        dx, dy = ray_offsets(angle, layers)
        count_x, count_y = anchor_extent(angle, layers, volume.nx, volume.ny)
        if count_x == 0 or count_y == 0:
            logger.warning(f"No {angle.value} ray fits a {volume.nx} x {volume.ny} section")
            continue

        for section in range(n_sections):
            total = np.zeros((count_y, count_x), dtype=np.float64)
            for layer in range(layers):
                z = section * layers + layer
                total += data[z, dy[layer] : dy[layer] + count_y, dx[layer] : dx[layer] + count_x]
            images[section, angle_index, :count_y, :count_x] = total / layers
            masks[section, angle_index, :count_y, :count_x] = True

    views = TiltViewSet(
        angles=geometry.angles,
        images=images,
        masks=masks,
        layers_per_section=layers,
        voxel_size=volume.voxel_size,
    )
    logger.debug(f"Simulated {n_sections} sections x {len(geometry.angles)} views of {volume.nx} x {volume.ny}")

    if noise is not None and not math.isinf(noise.snr_db):
        views = add_noise(views, noise.snr_db, noise.seed)
    return views


def add_noise(views: TiltViewSet, snr_db: float, seed: int) -> TiltViewSet:
    """
    Add i.i.d. Gaussian noise to the valid pixels.

    sigma = std(valid pixels of the whole set) * 10^(-snr_db / 20). The noise for every image is drawn in
    (section, angle) order from one generator seeded with ``seed``. snr_db = +inf returns the views unchanged.
    Views that already carry noise are rejected.
    """

    if math.isnan(snr_db) or snr_db == -math.inf:
        raise ConfigurationError(f"snr_db must be finite or +inf, got {snr_db}")
    if math.isinf(snr_db):
        return views
    if not math.isinf(views.snr_db):
        raise ConfigurationError(
            f"views already carry noise at {views.snr_db} dB (seed {views.noise_seed}), add noise to noiseless views"
        )

    valid = views.images[views.masks]
    if valid.size == 0:
        raise DegenerateDataError("views have no valid pixel to measure the signal level on")

    signal_std = float(valid.std())
    if signal_std == 0.0:
        raise DegenerateDataError(f"signal has zero variance, cannot add noise at {snr_db} dB")

    sigma = signal_std * 10.0 ** (-snr_db / 20.0)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(views.images.shape) * sigma
    images = np.where(views.masks, views.images + noise, views.images)
    logger.debug(f"Added noise sigma {sigma:.4e} ({snr_db} dB over signal std {signal_std:.4e})")

    return views.replace(images=images, snr_db=float(snr_db), noise_sigma=sigma, noise_seed=seed)


class MeasurementIndex:
    """
    Maps the rows of a projection model onto the pixels of a view set.

    Built once per (views, model) pair; ``lookup`` then reads the measurements of any patch origin.
    """

    def __init__(self, views: TiltViewSet, model: ProjectionModel):
        geometry = model.geometry
        if geometry.layers_per_section != views.layers_per_section:
            raise ShapeMismatchError(
                f"model uses L = {geometry.layers_per_section}, views use L = {views.layers_per_section}"
            )

        missing = [angle.value for angle in geometry.angles if angle not in views.angles]
        if missing:
            raise ShapeMismatchError(f"views lack the angles {missing} required by the projection model")

        self.views = views
        self.model = model
        self.angle = np.asarray([views.angle_index(angle) for angle in geometry.angles], dtype=np.int64)[
            model.row_angle
        ]
        nx, ny = views.lateral_dims
        self.upper = (nx - geometry.h, ny - geometry.h, views.n_sections - geometry.sections_per_patch)

    def check(self, origin: tuple[int, int, int]) -> None:
        x, y, s = origin
        if not (0 <= x <= self.upper[0] and 0 <= y <= self.upper[1] and 0 <= s <= self.upper[2]):
            raise OriginOutOfRangeError(
                f"patch origin (x={x}, y={y}, section={s}) is outside [0, {list(self.upper)}] of the views"
            )

    def lookup(self, origin: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
        self.check(origin)
        x, y, s = origin
        section = s + self.model.row_section
        px = x + self.model.row_pixel[:, 0]
        py = y + self.model.row_pixel[:, 1]
        return (
            self.views.images[section, self.angle, py, px],
            self.views.masks[section, self.angle, py, px],
        )


def gather_patch_measurements(
    views: TiltViewSet, model: ProjectionModel, patch_origin: tuple[int, int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """
    Measurements of one patch in projection-model row order.

    Args:
        views: View set to read from
        model: Projection model defining the rows
        patch_origin: (x, y, s) with s the first section of the patch

    Returns:
        (values, valid) where valid is False for rows reading an invalid (folded or out-of-bounds) pixel
    """

    return MeasurementIndex(views, model).lookup(patch_origin)


def select_angles(views: TiltViewSet, angles: Sequence[Angle]) -> TiltViewSet:
    """
    Subset of a view set restricted to ``angles``, in the given order.
    """

    indices = [views.angle_index(angle) for angle in angles]
    return views.replace(angles=tuple(angles), images=views.images[:, indices], masks=views.masks[:, indices])


def _image_stem(section: int, angle: Angle) -> str:
    return f"s{section:04d}_{angle.name.lower()}"


def save_views(views: TiltViewSet, path: PathLike) -> Path:
    """
    Write a TV1 view set into the directory ``path``: a manifest plus one float32 image and one bitmask per
    (section, angle).
    """

    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    nx, ny = views.lateral_dims
    entries = []

    for section in range(views.n_sections):
        for angle_index, angle in enumerate(views.angles):
            stem = _image_stem(section, angle)
            write_raw(directory / f"{stem}.raw", views.images[section, angle_index], dtype="<f4")
            write_bitmask(directory / f"{stem}.mask", views.masks[section, angle_index])
            entries.append({"section": section, "angle": angle.value, "image": f"{stem}.raw", "mask": f"{stem}.mask"})

    write_json(
        directory / MANIFEST_NAME,
        {
            "format": VIEWS_FORMAT,
            "n_sections": views.n_sections,
            "angles": [angle.value for angle in views.angles],
            "dims": [nx, ny],
            "layers_per_section": views.layers_per_section,
            "voxel_size_nm": list(views.voxel_size),
            "dtype": "f32",
            "byte_order": "little",
            "snr_db": views.snr_db,
            "snr_definition": "20 log10(std(valid pixels) / noise sigma)",
            "noise_sigma": views.noise_sigma,
            "noise_seed": views.noise_seed,
            "images": entries,
        },
    )
    logger.info(f"Wrote {len(entries)} views to {directory}")
    return directory


def load_views(path: PathLike) -> TiltViewSet:
    directory = Path(path)
    if directory.is_file():
        directory = directory.parent

    header = read_header(
        directory / MANIFEST_NAME,
        format_=VIEWS_FORMAT,
        required=("n_sections", "angles", "dims", "layers_per_section", "images"),
    )

    try:
        angles = tuple(Angle(value) for value in header["angles"])
        nx, ny = (int(dim) for dim in header["dims"])
        n_sections = int(header["n_sections"])
    except (ValueError, TypeError) as exc:
        raise MalformedHeaderError(f"Invalid view manifest in {directory}: {exc}") from exc

    images = np.zeros((n_sections, len(angles), ny, nx), dtype=np.float64)
    masks = np.zeros(images.shape, dtype=bool)
    seen = set()

    for entry in header["images"]:
        try:
            section, angle = int(entry["section"]), Angle(entry["angle"])
            angle_index = angles.index(angle)
        except (KeyError, ValueError, TypeError) as exc:
            raise MalformedHeaderError(f"Invalid view entry {entry!r}: {exc}") from exc
        if not 0 <= section < n_sections:
            raise MalformedHeaderError(f"View entry section {section} outside 0..{n_sections - 1}")

        images[section, angle_index] = read_raw(directory / entry["image"], dtype="<f4", count=nx * ny).reshape(ny, nx)
        masks[section, angle_index] = read_bitmask(directory / entry["mask"], (ny, nx))
        seen.add((section, angle_index))

    if len(seen) != n_sections * len(angles):
        raise MalformedHeaderError(f"View manifest lists {len(seen)} images, expected {n_sections * len(angles)}")
    if not np.all(np.isfinite(images)):
        raise NonFiniteValueError(f"Views in {directory} contain non-finite values")

    try:
        return TiltViewSet(
            angles=angles,
            images=images,
            masks=masks,
            layers_per_section=header["layers_per_section"],
            voxel_size=tuple(header.get("voxel_size_nm", (10.0, 10.0, 10.0))),
            snr_db=header.get("snr_db", math.inf),
            noise_sigma=header.get("noise_sigma", 0.0),
            noise_seed=header.get("noise_seed"),
        )
    except ValidationError as exc:
        raise MalformedHeaderError(f"Invalid view manifest in {directory}: {exc}") from exc
