from typing import Any, Optional, Sequence
from pathlib import Path
from em_superres.exceptions import ConfigurationError, DegenerateDataError, DimensionTooSmallError, ShapeMismatchError
from em_superres.helpers import PathLike
from em_superres.models import (
    Angle,
    Dictionary,
    FoldMask,
    LambdaSweepResult,
    MetricReport,
    ProjectionModel,
    ReconConfig,
    TiltGeometry,
    TiltViewSet,
    Volume3D,
)
from em_superres.reconstruction import reconstruct
from em_superres.tomography import anchor_extent, ray_offsets, select_angles
from scipy.interpolate import CubicSpline
from PIL import Image
import numpy as np
import logging

logger = logging.getLogger("em_superres_evaluation")


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.ravel(), b.ravel()
    norm_a, norm_b = float(np.sqrt(np.vdot(a, a))), float(np.sqrt(np.vdot(b, b)))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateDataError("normalized dot product of a zero-norm field")
    return float(np.clip(np.vdot(a, b) / (norm_a * norm_b), -1.0, 1.0))


def _check_dims(a: Volume3D, b: Volume3D) -> None:
    if a.dims != b.dims:
        raise ShapeMismatchError(f"volumes have different dims {a.dims} and {b.dims}")


def normalized_dot(a: Volume3D, b: Volume3D, *, centered: bool = False) -> float:
    """
    <a, b> / (||a|| ||b||) over all voxels, optionally after removing each volume's mean.
    """

    _check_dims(a, b)
    if centered:
        return _cosine(a.data - a.data.mean(), b.data - b.data.mean())
    return _cosine(a.data, b.data)


def _gradients(data: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Central differences (G_x, G_y, G_z) on the interior voxels of a (nz, ny, nx) array.
    """

    inner = slice(1, -1)
    gx = 0.5 * (data[inner, inner, 2:] - data[inner, inner, :-2])
    gy = 0.5 * (data[inner, 2:, inner] - data[inner, :-2, inner])
    gz = 0.5 * (data[2:, inner, inner] - data[:-2, inner, inner])
    return gx, gy, gz


def _field_cosine(a: np.ndarray, b: np.ndarray) -> float:
    # two flat fields agree; one flat field is orthogonal to anything
    zero_a, zero_b = not np.any(a), not np.any(b)
    if zero_a and zero_b:
        return 1.0
    if zero_a or zero_b:
        return 0.0
    return _cosine(a, b)


def gradient_metrics(truth: Volume3D, recon: Volume3D) -> tuple[float, float]:
    """
    Normalized dot products of the lateral (G_x and G_y together) and axial gradient fields.

    Returns:
        (grad_xy_ndp, grad_z_ndp)
    """

    _check_dims(truth, recon)
    if min(truth.dims) < 3:
        raise DimensionTooSmallError(f"gradient metrics need every dim >= 3, got {truth.dims}")

    tx, ty, tz = _gradients(truth.data)
    rx, ry, rz = _gradients(recon.data)
    grad_xy = _field_cosine(np.concatenate([tx.ravel(), ty.ravel()]), np.concatenate([rx.ravel(), ry.ravel()]))
    return grad_xy, _field_cosine(tz, rz)


def evaluate(truth: Volume3D, candidate: Volume3D, metadata: Optional[dict[str, Any]] = None) -> MetricReport:
    """
    Volume and gradient fidelity of a candidate against ground truth.
    """

    grad_xy, grad_z = gradient_metrics(truth, candidate)
    try:
        centered = normalized_dot(truth, candidate, centered=True)
    except DegenerateDataError:
        centered = None

    return MetricReport(
        volume_ndp=normalized_dot(truth, candidate),
        grad_xy_ndp=grad_xy,
        grad_z_ndp=grad_z,
        volume_ndp_centered=centered,
        metadata=metadata or {},
    )


def cubic_z_interpolate(views: TiltViewSet) -> Volume3D:
    """
    Interpolate the normal views along z.

    Each section's normal view is a sample at the section's axial center L s + (L - 1) / 2. A not-a-knot cubic
    spline per pixel is evaluated at every layer; layers outside the first and last centers take the end values.
    Two sections fall back to linear interpolation.
    """

    if views.n_sections < 2:
        raise DimensionTooSmallError(f"z-interpolation needs at least 2 sections, got {views.n_sections}")

    layers = views.layers_per_section
    samples = views.images[:, views.angle_index(Angle.Normal)]
    centers = layers * np.arange(views.n_sections) + (layers - 1) / 2.0
    z = np.clip(np.arange(layers * views.n_sections, dtype=np.float64), centers[0], centers[-1])

    if views.n_sections == 2:
        weight = ((z - centers[0]) / (centers[1] - centers[0]))[:, None, None]
        data = (1.0 - weight) * samples[0][None] + weight * samples[1][None]
    else:
        data = CubicSpline(centers, samples, axis=0, bc_type="not-a-knot")(z)

    return Volume3D(data=data, voxel_size=views.voxel_size)


def section_replicate(views: TiltViewSet) -> Volume3D:
    """
    Thick-section baseline: every layer of a section repeats the section's normal view.
    """

    samples = views.images[:, views.angle_index(Angle.Normal)]
    return Volume3D(data=np.repeat(samples, views.layers_per_section, axis=0), voxel_size=views.voxel_size)


def backproject(views: TiltViewSet, geometry: Optional[TiltGeometry] = None) -> Volume3D:
    """
    Unfiltered backprojection.

    Every valid pixel value is spread evenly over the L voxels of its ray; a voxel is the mean of all contributions
    it received. Voxels no ray reaches take the normal view value of their section (0 without a normal view).

    Args:
        views: Tilt views
        geometry: Optional geometry restricting the angles used
    """

    if geometry is not None:
        if geometry.layers_per_section != views.layers_per_section:
            raise ShapeMismatchError(
                f"geometry uses L = {geometry.layers_per_section}, views use L = {views.layers_per_section}"
            )
        views = select_angles(views, geometry.angles)

    layers = views.layers_per_section
    nx, ny = views.lateral_dims
    nz = layers * views.n_sections
    sums = np.zeros((nz, ny, nx), dtype=np.float64)
    counts = np.zeros((nz, ny, nx), dtype=np.int64)

    for angle_index, angle in enumerate(views.angles):
        dx, dy = ray_offsets(angle, layers)
        count_x, count_y = anchor_extent(angle, layers, nx, ny)
        if count_x == 0 or count_y == 0:
            continue
        for section in range(views.n_sections):
            valid = views.masks[section, angle_index, :count_y, :count_x]
            values = np.where(valid, views.images[section, angle_index, :count_y, :count_x], 0.0)
            for layer in range(layers):
                z = section * layers + layer
                window = (z, slice(dy[layer], dy[layer] + count_y), slice(dx[layer], dx[layer] + count_x))
                sums[window] += values
                counts[window] += valid

    uncovered = counts == 0
    data = sums / np.maximum(counts, 1)
    if uncovered.any():
        fill = section_replicate(views).data if Angle.Normal in views.angles else np.zeros_like(data)
        data[uncovered] = fill[uncovered]
        logger.warning(f"{int(uncovered.sum())} voxels received no ray, filled from the normal view")

    return Volume3D(data=data, voxel_size=views.voxel_size)


def sweep_lambda(
    truth: Volume3D,
    views: TiltViewSet,
    dictionary: Dictionary,
    model: ProjectionModel,
    lambdas: Sequence[float],
    config: Optional[ReconConfig] = None,
    folds: Optional[FoldMask] = None,
    *,
    workers: int = 1,
) -> LambdaSweepResult:
    """
    Reconstruct once per lambda (used for both steps) and score each result against the truth.

    The best lambda is the one with the highest volume normalized dot product, the first one on ties.
    """

    if not lambdas:
        raise ConfigurationError("lambda sweep needs at least one lambda")

    config = config or ReconConfig()
    reports = []
    for lambda_ in lambdas:
        run_config = config.model_copy(update={"lambda_recover": lambda_, "lambda_smooth": lambda_})
        result = reconstruct(views, dictionary, model, run_config, folds, workers=workers)
        reports.append(
            evaluate(truth, result.volume, {"lambda": lambda_, "snr_db": views.snr_db, "method": "sparse"})
        )
        logger.debug(f"lambda {lambda_}: volume ndp {reports[-1].volume_ndp:.4f}")

    best = int(np.argmax([report.volume_ndp for report in reports]))
    return LambdaSweepResult(lambdas=list(lambdas), reports=reports, best_lambda=lambdas[best])


def render_xz_slice(
    volume: Volume3D, y: Optional[int] = None, window: Optional[tuple[float, float]] = None
) -> np.ndarray:
    """
    8-bit x-z re-slice at row ``y`` (the middle row by default), linearly windowed to [low, high].
    """

    y = volume.ny // 2 if y is None else y
    if not 0 <= y < volume.ny:
        raise ShapeMismatchError(f"slice row {y} outside 0..{volume.ny - 1}")

    plane = volume.data[:, y, :]
    low, high = window if window is not None else (float(volume.data.min()), float(volume.data.max()))
    if high <= low:
        return np.zeros(plane.shape, dtype=np.uint8)
    scaled = np.clip((plane - low) / (high - low), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def save_xz_png(
    volume: Volume3D, path: PathLike, y: Optional[int] = None, window: Optional[tuple[float, float]] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_xz_slice(volume, y, window)).save(path)
    logger.info(f"Wrote x-z slice to {path}")
    return path
