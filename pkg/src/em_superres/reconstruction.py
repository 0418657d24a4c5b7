from typing import Iterable, Optional
from pathlib import Path
from concurrent.futures import ThreadPoolExecutor
from em_superres.exceptions import (
    ConfigurationError,
    ConvergenceWarning,
    DimensionTooSmallError,
    MalformedHeaderError,
    NonFiniteValueError,
    ShapeMismatchError,
)
from em_superres.helpers import PathLike, chunked, read_header, read_raw, sidecar_paths, write_json, write_raw
from em_superres.models import (
    Angle,
    Dictionary,
    FoldDetectConfig,
    FoldMask,
    PatchSpec,
    ProjectionModel,
    ReconConfig,
    ReconReport,
    ReconstructionResult,
    SolverConfig,
    TiltViewSet,
    Volume3D,
)
from em_superres.solver import LassoSolver
from em_superres.tomography import MeasurementIndex, build_projection_model
from em_superres.volume import PatchAccumulator, gather_columns, patch_origins
from scipy import ndimage
import numpy as np
import logging
import warnings

logger = logging.getLogger("em_superres_reconstruction")

FOLD_FORMAT = "FM1"
DEFAULT_CHUNK = 2048
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def detect_folds(section_image: np.ndarray, config: Optional[FoldDetectConfig] = None) -> FoldMask:
    """
    Fold mask of one section image.

    Pixels darker than mean - n_sigma * std (brighter than mean + n_sigma * std with reversed contrast) are folds.
    The mask is closed with a square element, non-fold components smaller than ``min_region`` pixels are absorbed
    and fold components smaller than ``min_fold`` pixels are dropped as dust. Components are 8-connected.

    Args:
        section_image: (ny, nx) image
        config: Detection settings

    Returns:
        FoldMask with a single section
    """

    config = config or FoldDetectConfig()
    image = np.asarray(section_image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeMismatchError(f"section image must be 2D, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise NonFiniteValueError("section image contains non-finite values")

    mean, sigma = float(image.mean()), float(image.std())
    if sigma == 0.0:
        logger.warning("Section image has zero variance, no folds detected")
        return FoldMask(masks=np.zeros((1, *image.shape), dtype=bool))

    if config.reversed_contrast:
        mask = image > mean + config.n_sigma * sigma
    else:
        mask = image < mean - config.n_sigma * sigma

    if mask.any():
        structure = np.ones((config.closing_size, config.closing_size), dtype=bool)
        pad = (config.closing_size // 2) * config.closing_iterations
        padded = np.pad(mask, pad, mode="edge")
        closed = ndimage.binary_dilation(padded, structure=structure, iterations=config.closing_iterations)
        closed = ndimage.binary_erosion(
            closed, structure=structure, iterations=config.closing_iterations, border_value=1
        )
        mask = closed[pad : pad + image.shape[0], pad : pad + image.shape[1]] if pad else closed

        labels, count = ndimage.label(~mask, structure=EIGHT_CONNECTED)
        sizes = np.bincount(labels.ravel(), minlength=count + 1)
        small = np.flatnonzero(sizes < config.min_region)
        small = small[small > 0]
        if small.size:
            mask = mask | np.isin(labels, small)

        labels, count = ndimage.label(mask, structure=EIGHT_CONNECTED)
        sizes = np.bincount(labels.ravel(), minlength=count + 1)
        dust = np.flatnonzero(sizes < config.min_fold)
        dust = dust[dust > 0]
        if dust.size:
            mask = mask & ~np.isin(labels, dust)

    logger.debug(f"Detected {int(mask.sum())} fold pixels (threshold {config.n_sigma} sigma)")
    return FoldMask(masks=mask[None])


def detect_section_folds(views: TiltViewSet, config: Optional[FoldDetectConfig] = None) -> FoldMask:
    """
    Run ``detect_folds`` on the normal view of every section.
    """

    normal = views.angle_index(Angle.Normal)
    masks = [detect_folds(views.images[section, normal], config).masks[0] for section in range(views.n_sections)]
    return FoldMask(masks=np.stack(masks))


def _check_fold_dims(views: TiltViewSet, folds: FoldMask) -> None:
    if folds.n_sections != views.n_sections or folds.lateral_dims != views.lateral_dims:
        raise ShapeMismatchError(
            f"fold mask {folds.n_sections} x {folds.lateral_dims} does not match views "
            f"{views.n_sections} x {views.lateral_dims}"
        )


def apply_folds(views: TiltViewSet, folds: FoldMask) -> TiltViewSet:
    """
    Invalidate the fold pixels of every angle of each folded section.
    """

    _check_fold_dims(views, folds)
    if not folds.any():
        return views
    return views.replace(masks=views.masks & ~folds.masks[:, None, :, :])


def mark_lost_sections(folds: FoldMask, sections: Iterable[int]) -> FoldMask:
    """
    Mark whole sections as missing. Two consecutive lost sections cannot be recovered and are rejected.
    """

    masks = np.array(folds.masks)
    for section in sections:
        if not 0 <= section < folds.n_sections:
            raise ShapeMismatchError(f"section {section} outside 0..{folds.n_sections - 1}")
        masks[section] = True

    lost = masks.reshape(masks.shape[0], -1).all(axis=1)
    runs = np.flatnonzero(lost[:-1] & lost[1:])
    if runs.size:
        raise ConfigurationError(f"sections {int(runs[0])} and {int(runs[0]) + 1} are both lost")

    return FoldMask(masks=masks)


def save_fold_mask(folds: FoldMask, path: PathLike) -> tuple[Path, Path]:
    """
    Write an FM1 fold mask: JSON manifest plus one packed 1-bit bitmap per section.
    """

    json_path, raw_path = sidecar_paths(path)
    nx, ny = folds.lateral_dims
    packed = np.packbits(folds.masks.reshape(folds.n_sections, -1), axis=1)
    write_raw(raw_path, packed, dtype="u1")
    write_json(
        json_path,
        {
            "format": FOLD_FORMAT,
            "n_sections": folds.n_sections,
            "dims": [nx, ny],
            "bytes_per_section": int(packed.shape[1]),
            "fold_pixels": [int(count) for count in folds.masks.reshape(folds.n_sections, -1).sum(axis=1)],
        },
    )
    logger.info(f"Wrote fold mask of {folds.n_sections} sections to {raw_path}")
    return json_path, raw_path


def load_fold_mask(path: PathLike) -> FoldMask:
    json_path, raw_path = sidecar_paths(path)
    header = read_header(json_path, format_=FOLD_FORMAT, required=("n_sections", "dims"))

    try:
        n_sections = int(header["n_sections"])
        nx, ny = (int(dim) for dim in header["dims"])
    except (TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"Invalid fold mask header {json_path}: {exc}") from exc

    per_section = (nx * ny + 7) // 8
    packed = read_raw(raw_path, dtype="u1", count=n_sections * per_section).reshape(n_sections, per_section)
    masks = np.unpackbits(packed, axis=1, count=nx * ny).astype(bool).reshape(n_sections, ny, nx)
    return FoldMask(masks=masks)


class _PatchRecovery:
    """
    Per-origin lasso recovery with B = P D, sharing the full Gram matrix between patches with complete measurements.
    """

    def __init__(self, index: MeasurementIndex, dictionary: Dictionary, config: ReconConfig, chunk_size: int):
        self.index = index
        self.atoms = dictionary.atoms
        self.operator = np.ascontiguousarray(index.model.matrix @ dictionary.atoms)
        self.lambda_ = config.lambda_recover
        self.volume_units = config.lambda_units == "volume"
        self.solver_config = SolverConfig(max_iter=config.max_iter, tol=config.tol)
        gram = self.operator.T @ self.operator
        self.solver = LassoSolver(self.operator, self.solver_config.with_lambda(self.scaled_lambda(gram)), gram=gram)
        self.floor = config.min_valid_fraction * self.operator.shape[0]
        self.layers = index.views.layers_per_section
        self.chunk_size = chunk_size

    def scaled_lambda(self, gram: np.ndarray) -> float:
        """
        lambda_recover in measurement units for the rows whose Gram matrix is ``gram``.
        """

        if not self.volume_units:
            return self.lambda_
        return self.lambda_ * float(np.trace(gram)) / gram.shape[0]

    def __call__(self, origins: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
        """
        Args:
            origins: (count, 3) voxel origins (x, y, z), z on a section boundary

        Returns:
            (decoded patches of the kept origins, kept flags, non-converged solves)
        """

        m, count = self.operator.shape[0], len(origins)
        Y = np.empty((m, count), dtype=np.float64)
        valid = np.empty((m, count), dtype=bool)
        for column, (x, y, z) in enumerate(origins):
            Y[:, column], valid[:, column] = self.index.lookup((int(x), int(y), int(z) // self.layers))

        complete = valid.all(axis=0)
        kept = complete | ((valid.sum(axis=0) >= self.floor) & valid.any(axis=0))
        codes = np.zeros((self.operator.shape[1], count), dtype=np.float64)
        nonconverged = 0

        if complete.any():
            columns = np.flatnonzero(complete)
            solution = self.solver.solve(Y[:, columns], chunk_size=self.chunk_size, warn=False)
            codes[:, columns] = solution.coeffs
            nonconverged += solution.nonconverged

        for column in np.flatnonzero(kept & ~complete):
            rows = valid[:, column]
            dropped = self.operator[~rows]
            gram = self.solver.gram - dropped.T @ dropped
            config = self.solver_config.with_lambda(self.scaled_lambda(gram))
            solution = LassoSolver(self.operator[rows], config, gram=gram).solve(Y[rows, column][:, None], warn=False)
            codes[:, column] = solution.coeffs[:, 0]
            nonconverged += solution.nonconverged

        return self.atoms @ codes[:, kept], kept, nonconverged


def _run_chunks(work, blocks: list[slice], workers: int, consume) -> None:
    """
    Evaluate ``work`` on every block, up to ``workers`` at a time, and hand the results to ``consume`` in block order.
    """

    if workers <= 1:
        for block in blocks:
            consume(block, work(block))
        return

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for wave in chunked(len(blocks), workers):
            for block, result in zip(blocks[wave], pool.map(work, blocks[wave])):
                consume(block, result)


def _smooth(
    data: np.ndarray,
    dictionary: Dictionary,
    config: ReconConfig,
    *,
    workers: int,
    chunk_size: int,
) -> tuple[np.ndarray, int, int]:
    nz, ny, nx = data.shape
    spec = PatchSpec(h=dictionary.spec.h, v=dictionary.spec.v, stride=config.smooth_stride)
    origins = patch_origins((nx, ny, nz), spec)
    solver = LassoSolver(
        dictionary.atoms, SolverConfig(lambda_=config.lambda_smooth, max_iter=config.max_iter, tol=config.tol)
    )
    accumulator = PatchAccumulator((nx, ny, nz), spec)
    nonconverged = 0

    def work(block: slice) -> tuple[np.ndarray, int]:
        solution = solver.solve(gather_columns(data, spec, origins[block]), chunk_size=chunk_size, warn=False)
        return dictionary.atoms @ solution.coeffs, solution.nonconverged

    def consume(block: slice, result: tuple[np.ndarray, int]) -> None:
        nonlocal nonconverged
        accumulator.add(origins[block], result[0])
        nonconverged += result[1]

    _run_chunks(work, list(chunked(len(origins), chunk_size)), workers, consume)
    logger.debug(f"Smoothed with {len(origins)} patches at stride {config.smooth_stride}")
    return accumulator.average(), len(origins), nonconverged


def reconstruct(
    views: TiltViewSet,
    dictionary: Dictionary,
    model: ProjectionModel,
    config: Optional[ReconConfig] = None,
    folds: Optional[FoldMask] = None,
    *,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
) -> ReconstructionResult:
    """
    Recover a volume from tilt views patch by patch, then optionally re-code it densely against the dictionary.

    The recovery step solves one lasso problem per origin of the ``recover_stride`` lattice using only the valid
    measurement rows, decodes it and averages the overlapping patches. The smoothing step re-extracts patches on the
    ``smooth_stride`` lattice, codes them with the dictionary itself and averages again; its output replaces the
    recovery output. Patches are accumulated in origin order, so results do not depend on ``workers``.

    Args:
        views: Tilt views of n_sections sections
        dictionary: Learned dictionary whose patch geometry matches the model
        model: Projection model of one patch
        config: Reconstruction settings
        folds: Optional fold mask; fold pixels are dropped from every angle of their section
        workers: Threads solving patch chunks
        chunk_size: Patches per work item

    Returns:
        ReconstructionResult with the (nx, ny, L * n_sections) volume and a run report
    """

    config = config or ReconConfig()
    geometry = model.geometry
    if (dictionary.spec.h, dictionary.spec.v) != (geometry.h, geometry.v):
        extent = (geometry.h, geometry.h, geometry.v)
        raise ShapeMismatchError(f"dictionary patch {dictionary.spec.extent} does not match model patch {extent}")

    layers = geometry.layers_per_section
    if config.recover_stride[2] % layers:
        raise ConfigurationError(f"recover stride z = {config.recover_stride[2]} is not a multiple of L = {layers}")
    if views.n_sections < geometry.sections_per_patch:
        raise DimensionTooSmallError(
            f"{views.n_sections} sections are fewer than the {geometry.sections_per_patch} a patch spans"
        )

    if config.single_view and geometry.angles != (Angle.Normal,):
        model = build_projection_model(geometry.with_angles((Angle.Normal,)))
    if folds is not None:
        views = apply_folds(views, folds)

    nx, ny = views.lateral_dims
    dims = (nx, ny, layers * views.n_sections)
    spec = PatchSpec(h=geometry.h, v=geometry.v, stride=config.recover_stride)
    origins = patch_origins(dims, spec)
    recovery = _PatchRecovery(MeasurementIndex(views, model), dictionary, config, chunk_size)
    accumulator = PatchAccumulator(dims, spec)
    report = ReconReport(patches_total=len(origins))

    def consume(block: slice, result: tuple[np.ndarray, np.ndarray, int]) -> None:
        decoded, kept, nonconverged = result
        accumulator.add(origins[block][kept], decoded)
        report.nonconverged += nonconverged
        for x, y, z in origins[block][~kept]:
            report.skipped_origins.append((int(x), int(y), int(z)))

    blocks = list(chunked(len(origins), chunk_size))
    _run_chunks(lambda block: recovery(origins[block]), blocks, workers, consume)
    report.patches_skipped = len(report.skipped_origins)
    logger.debug(f"Recovered {len(origins) - report.patches_skipped} of {len(origins)} patches")

    if report.patches_skipped:
        logger.warning(
            f"Skipped {report.patches_skipped} patches with fewer than {config.min_valid_fraction:.0%} valid rows"
        )

    uncovered = accumulator.uncovered()
    report.uncovered_voxels = int(uncovered.sum())
    data = accumulator.average(fill=0.0)
    if report.uncovered_voxels:
        logger.warning(f"{report.uncovered_voxels} voxels are covered only by skipped patches, filled with 0")

    if config.smooth_enabled:
        data, report.smooth_patches, nonconverged = _smooth(
            data, dictionary, config, workers=workers, chunk_size=chunk_size
        )
        report.nonconverged += nonconverged

    if report.nonconverged:
        logger.warning(f"{report.nonconverged} lasso solves hit the iteration cap ({config.max_iter})")
        warnings.warn(f"{report.nonconverged} lasso solves did not converge", ConvergenceWarning, stacklevel=2)

    return ReconstructionResult(
        volume=Volume3D(dims=dims, voxel_size=views.voxel_size, data=data),
        report=report,
        coverage_flag=uncovered if report.uncovered_voxels else None,
    )


def reconstruct_volume(
    views: TiltViewSet,
    dictionary: Dictionary,
    model: ProjectionModel,
    config: Optional[ReconConfig] = None,
    folds: Optional[FoldMask] = None,
    *,
    workers: int = 1,
) -> Volume3D:
    return reconstruct(views, dictionary, model, config, folds, workers=workers).volume


def inpaint(
    views: TiltViewSet,
    dictionary: Dictionary,
    model: ProjectionModel,
    config: Optional[ReconConfig],
    folds: FoldMask,
    *,
    workers: int = 1,
) -> Volume3D:
    """
    Reconstruct while ignoring the fold pixels of every section. Each patch spans several sections, so occluded
    regions are filled from the sections above and below.
    """

    if folds is None:
        raise ConfigurationError("inpainting needs a fold mask")
    return reconstruct(views, dictionary, model, config, folds, workers=workers).volume
