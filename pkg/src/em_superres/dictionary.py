from typing import Optional, Sequence, Union
from pathlib import Path
from em_superres.exceptions import (
    ConfigurationError,
    DegenerateDataError,
    MalformedHeaderError,
    NonFiniteValueError,
    NormViolationError,
    ShapeMismatchError,
)
from em_superres.helpers import (
    PathLike,
    chunked,
    hash_array,
    read_header,
    read_raw,
    sidecar_paths,
    write_json,
    write_raw,
)
from em_superres.models import (
    UNIT_NORM_TOL,
    Dictionary,
    DictionaryProvenance,
    LearnConfig,
    PatchBatch,
    PatchSpec,
    SolverConfig,
    SparseCode,
)
from em_superres.solver import LassoSolver, stack_codes
from em_superres.volume import center_patches
from pydantic import ValidationError
import numpy as np
import logging

logger = logging.getLogger("em_superres_dictionary")

DICTIONARY_FORMAT = "VD1"
LOAD_NORM_TOL = 1e-6


def normalize_columns(atoms: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(atoms, axis=0)
    if np.any(norms == 0.0):
        raise DegenerateDataError(f"cannot normalize zero atoms {np.flatnonzero(norms == 0.0).tolist()}")
    return atoms / norms


def _patch_matrix(patches: Union[PatchBatch, np.ndarray]) -> np.ndarray:
    return patches.matrix if isinstance(patches, PatchBatch) else np.asarray(patches, dtype=np.float64)


def _code_matrix(codes: Union[Sequence[SparseCode], np.ndarray]) -> np.ndarray:
    if isinstance(codes, np.ndarray):
        return np.asarray(codes, dtype=np.float64)
    return stack_codes(codes)


def objective(atoms: np.ndarray, codes: np.ndarray, X: np.ndarray, lambda_: float) -> float:
    """
    Training objective sum_i 1/2 ||x_i - D a_i||^2 + lambda ||a_i||_1.
    """

    residual = X - atoms @ codes
    return float(0.5 * np.sum(residual * residual) + lambda_ * np.abs(codes).sum())


def _replace_dead(atoms: np.ndarray, dead: list[int], codes: np.ndarray, X: np.ndarray) -> int:
    """
    Swap every dead atom for one of the worst-represented training patches, normalized. Returns the swap count.
    """

    if not dead:
        return 0

    residual_norms = np.linalg.norm(X - atoms @ codes, axis=0)
    patch_norms = np.linalg.norm(X, axis=0)
    order = np.argsort(-residual_norms, kind="stable")
    candidates = [int(index) for index in order if patch_norms[index] > 0.0]

    replaced = 0
    for atom, patch in zip(dead, candidates):
        atoms[:, atom] = X[:, patch] / patch_norms[patch]
        replaced += 1

    if replaced < len(dead):
        logger.warning(f"Only {replaced} of {len(dead)} dead atoms could be replaced, the rest keep their values")
    return replaced


def _block_update(atoms: np.ndarray, gram: np.ndarray, cross: np.ndarray, passes: int) -> tuple[np.ndarray, list[int]]:
    """
    Block coordinate descent over the atoms given the code statistics gram = A A^T and cross = X A^T.

    Each column update d_j <- u_j / ||u_j|| with u_j = (cross_j - D gram_j) / gram_jj + d_j is the exact minimizer
    of the representation error over the unit sphere with the other atoms fixed.
    """

    D = np.array(atoms, dtype=np.float64, order="F", copy=True)
    dead = [j for j in range(D.shape[1]) if gram[j, j] <= 0.0]
    dead_set = set(dead)

    for _ in range(passes):
        for j in range(D.shape[1]):
            if j in dead_set:
                continue
            u = (cross[:, j] - D @ gram[:, j]) / gram[j, j] + D[:, j]
            norm = np.linalg.norm(u)
            if norm > 0.0:
                D[:, j] = u / norm

    return np.ascontiguousarray(D), dead


def update_dictionary_step(
    atoms: np.ndarray,
    codes: Union[Sequence[SparseCode], np.ndarray],
    patches: Union[PatchBatch, np.ndarray],
    *,
    passes: int = 1,
) -> np.ndarray:
    """
    One dictionary update with the codes fixed.

    Args:
        atoms: (n, k) current unit-norm atoms
        codes: Codes of the patches, as SparseCode list or (k, count) matrix
        patches: Training patches, as PatchBatch or (n, count) matrix
        passes: Sweeps over the atoms

    Returns:
        (n, k) updated atoms, every column of unit norm
    """

    atoms = np.asarray(atoms, dtype=np.float64)
    X = _patch_matrix(patches)
    A = _code_matrix(codes)

    if X.shape[0] != atoms.shape[0] or A.shape[0] != atoms.shape[1] or A.shape[1] != X.shape[1]:
        raise ShapeMismatchError(f"atoms {atoms.shape}, codes {A.shape} and patches {X.shape} are inconsistent")

    updated, dead = _block_update(atoms, A @ A.T, X @ A.T, passes)
    replaced = _replace_dead(updated, dead, A, X)
    if replaced:
        logger.debug(f"Replaced {replaced} dead atoms")
    return updated


def _initial_atoms(X: np.ndarray, config: LearnConfig, initial: Optional[Dictionary]) -> np.ndarray:
    if config.init == "provided" or initial is not None:
        if initial is None:
            raise ConfigurationError("init 'provided' needs an initial dictionary")
        if initial.n != X.shape[0]:
            raise ShapeMismatchError(f"initial dictionary has n = {initial.n}, patches have n = {X.shape[0]}")
        return np.array(initial.atoms)

    norms = np.linalg.norm(X, axis=0)
    nonzero = np.flatnonzero(norms > 0.0)
    if config.k > nonzero.size:
        raise ConfigurationError(f"cannot seed {config.k} distinct atoms from {nonzero.size} nonzero patches")

    rng = np.random.default_rng(config.seed)
    chosen = np.sort(rng.choice(nonzero, size=config.k, replace=False))
    return X[:, chosen] / norms[chosen]


def _solver_config(config: LearnConfig) -> SolverConfig:
    return SolverConfig(lambda_=config.lambda_, tol=config.solver_tol, max_iter=config.solver_max_iter)


def _learn_batch(
    atoms: np.ndarray, X: np.ndarray, config: LearnConfig, workers: int
) -> tuple[np.ndarray, list[float], int, int]:
    solver_config = _solver_config(config)
    codes = np.zeros((atoms.shape[1], X.shape[1]), dtype=np.float64)
    trace: list[float] = []
    replaced_total = 0
    epochs = 0

    for epoch in range(config.n_epochs):
        epochs = epoch + 1
        solution = LassoSolver(atoms, solver_config).solve(X, initial=codes, workers=workers)
        codes = solution.coeffs
        value = float(solution.objectives.sum())
        trace.append(value)
        logger.debug(f"Epoch {epochs}: objective {value:.6e}, {solution.nonconverged} non-converged codes")

        if len(trace) > 1 and trace[-2] - value <= config.plateau_tol * abs(trace[-2]):
            logger.debug(f"Objective plateaued after {epochs} epochs")
            break

        atoms, dead = _block_update(atoms, codes @ codes.T, X @ codes.T, config.atom_passes)
        replaced_total += _replace_dead(atoms, dead, codes, X)

    return atoms, trace, epochs, replaced_total


def _learn_online(
    atoms: np.ndarray, X: np.ndarray, config: LearnConfig, workers: int
) -> tuple[np.ndarray, list[float], int, int]:
    """
    Mini-batch learning. The statistics gram = sum a a^T and cross = sum x a^T are rebuilt every epoch and updated
    after each mini-batch; the trace holds the summed mini-batch objectives of each epoch.
    """

    solver_config = _solver_config(config)
    rng = np.random.default_rng(config.seed + 1)
    codes = np.zeros((atoms.shape[1], X.shape[1]), dtype=np.float64)
    trace: list[float] = []
    replaced_total = 0
    epochs = 0

    for epoch in range(config.n_epochs):
        epochs = epoch + 1
        gram = np.zeros((atoms.shape[1], atoms.shape[1]), dtype=np.float64)
        cross = np.zeros_like(atoms)
        order = rng.permutation(X.shape[1])
        value = 0.0

        for block in chunked(len(order), config.batch_size):
            columns = np.sort(order[block])
            batch = X[:, columns]
            solution = LassoSolver(atoms, solver_config).solve(batch, initial=codes[:, columns], workers=workers)
            codes[:, columns] = solution.coeffs
            value += float(solution.objectives.sum())

            gram += solution.coeffs @ solution.coeffs.T
            cross += batch @ solution.coeffs.T
            atoms, dead = _block_update(atoms, gram, cross, config.atom_passes)
            replaced_total += _replace_dead(atoms, dead, solution.coeffs, batch)

        trace.append(value)
        logger.debug(f"Epoch {epochs}: mini-batch objective {value:.6e}")

        if len(trace) > 1 and abs(trace[-2] - value) <= config.plateau_tol * abs(trace[-2]):
            break

    return atoms, trace, epochs, replaced_total


def learn_dictionary(
    patches: PatchBatch,
    config: LearnConfig,
    *,
    initial: Optional[Dictionary] = None,
    workers: int = 1,
) -> Dictionary:
    """
    Learn a unit-norm dictionary by alternating sparse coding and dictionary updates.

    In batch mode every epoch codes the full training set (warm-started from the previous codes) and then updates
    all atoms, so the recorded objective never increases. Learning stops after ``n_epochs`` or once an epoch lowers
    the objective by less than ``plateau_tol`` relative.

    Args:
        patches: Training patches
        config: Learning settings
        initial: Starting dictionary, used when ``config.init`` is "provided" (or whenever given)
        workers: Threads for the coding step

    Returns:
        Dictionary with provenance (objective trace, dataset hash, representation statistics)
    """

    batch = center_patches(patches)[0] if config.center else patches
    X = np.ascontiguousarray(batch.matrix)

    if X.shape[1] == 0 or not np.any(X):
        raise DegenerateDataError("training set has no nonzero patch")
    if not np.all(np.isfinite(X)):
        raise NonFiniteValueError("training patches contain non-finite values")

    atoms = _initial_atoms(X, config, initial)
    logger.debug(f"Learning {atoms.shape[1]} atoms of length {atoms.shape[0]} from {X.shape[1]} patches")

    learn = _learn_online if config.mode == "online" else _learn_batch
    atoms, trace, epochs, replaced = learn(atoms, X, config, workers)

    spec = patches.spec
    dictionary = Dictionary(spec=spec, atoms=atoms)
    active, error = representation_stats(dictionary, X, config.lambda_, workers=workers)

    provenance = DictionaryProvenance(
        lambda_=config.lambda_,
        iterations=epochs,
        dataset_hash=hash_array(patches.matrix),
        objective_trace=trace,
        mean_active_atoms=active,
        mean_relative_error=error,
        replaced_atoms=replaced,
    )
    logger.debug(f"Learned dictionary: {active:.1f} active atoms per patch, relative error {error:.4f}")

    return Dictionary(spec=spec, atoms=dictionary.atoms, provenance=provenance)


def encode(
    dictionary: Dictionary,
    patches: Union[PatchBatch, np.ndarray],
    lambda_: float,
    *,
    config: Optional[SolverConfig] = None,
    workers: int = 1,
) -> list[SparseCode]:
    """
    Sparse codes of every patch against the dictionary atoms.
    """

    X = _patch_matrix(patches)
    if X.ndim != 2 or X.shape[0] != dictionary.n:
        raise ShapeMismatchError(f"patches of length {X.shape[0]} do not match dictionary n = {dictionary.n}")

    config = (config or SolverConfig()).with_lambda(lambda_)
    solution = LassoSolver(dictionary.atoms, config).solve(X, workers=workers)
    return [solution.code(column, lambda_) for column in range(X.shape[1])]


def representation_stats(
    dictionary: Dictionary, patches: Union[PatchBatch, np.ndarray], lambda_: float, *, workers: int = 1
) -> tuple[float, float]:
    """
    Mean number of active atoms per patch and mean relative error ||x - Da||^2 / ||x||^2 over nonzero patches.
    """

    X = _patch_matrix(patches)
    if X.shape[0] != dictionary.n:
        raise ShapeMismatchError(f"patches of length {X.shape[0]} do not match dictionary n = {dictionary.n}")

    solution = LassoSolver(dictionary.atoms, SolverConfig(lambda_=lambda_)).solve(X, workers=workers)
    active = float(np.count_nonzero(solution.coeffs, axis=0).mean()) if X.shape[1] else 0.0

    energy = np.sum(X * X, axis=0)
    nonzero = energy > 0.0
    if not nonzero.any():
        return active, 0.0

    residual = X[:, nonzero] - dictionary.atoms @ solution.coeffs[:, nonzero]
    return active, float(np.mean(np.sum(residual * residual, axis=0) / energy[nonzero]))


def save_dictionary(dictionary: Dictionary, path: PathLike) -> tuple[Path, Path]:
    """
    Write a VD1 dictionary: JSON header plus float64 little-endian atoms, one atom after another.
    """

    json_path, raw_path = sidecar_paths(path)
    write_raw(raw_path, dictionary.atoms.T, dtype="<f8")
    write_json(
        json_path,
        {
            "format": DICTIONARY_FORMAT,
            "n": dictionary.n,
            "k": dictionary.k,
            "patch": [dictionary.spec.h, dictionary.spec.h, dictionary.spec.v],
            "stride": list(dictionary.spec.stride),
            "lambda": dictionary.provenance.lambda_,
            "provenance": dictionary.provenance.model_dump(mode="json", by_alias=True),
        },
    )
    logger.info(f"Wrote dictionary n={dictionary.n} k={dictionary.k} to {raw_path}")
    return json_path, raw_path


def load_dictionary(path: PathLike) -> Dictionary:
    """
    Read a VD1 dictionary.

    Atom norms deviating from 1 by more than 1e-6 are rejected; smaller deviations are renormalized.
    """

    json_path, raw_path = sidecar_paths(path)
    header = read_header(json_path, format_=DICTIONARY_FORMAT, required=("n", "k", "patch", "lambda"))

    n, k, patch = header["n"], header["k"], header["patch"]
    if not isinstance(n, int) or not isinstance(k, int) or n < 1 or k < 1:
        raise MalformedHeaderError(f"Header n and k must be positive integers, got {n!r}, {k!r}")
    if not isinstance(patch, list) or len(patch) != 3 or patch[0] != patch[1]:
        raise MalformedHeaderError(f"Header patch must be [h, h, v], got {patch!r}")
    if patch[0] * patch[1] * patch[2] != n:
        raise MalformedHeaderError(f"Header patch {patch} does not hold n = {n} voxels")

    try:
        stride = tuple(header.get("stride", [1, 1, 1]))
        spec = PatchSpec(h=patch[0], v=patch[2], stride=stride)
        provenance = DictionaryProvenance.model_validate({**header.get("provenance", {}), "lambda": header["lambda"]})
    except (ValidationError, TypeError) as exc:
        raise MalformedHeaderError(f"Invalid dictionary header {json_path}: {exc}") from exc

    atoms = read_raw(raw_path, dtype="<f8", count=n * k).reshape(k, n).T.astype(np.float64)
    if not np.all(np.isfinite(atoms)):
        raise NonFiniteValueError(f"Payload {raw_path} contains non-finite values")

    norms = np.linalg.norm(atoms, axis=0)
    deviation = np.abs(norms - 1.0)
    if np.any(deviation > LOAD_NORM_TOL):
        bad = np.flatnonzero(deviation > LOAD_NORM_TOL)
        raise NormViolationError(f"Atoms {bad[:10].tolist()} of {raw_path} have norms {norms[bad[:10]].tolist()}")
    if np.any(deviation > UNIT_NORM_TOL):
        atoms = atoms / norms

    return Dictionary(spec=spec, atoms=atoms, provenance=provenance)
