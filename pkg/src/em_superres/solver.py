"""
Lasso solvers for min_a 1/2 ||y - Ba||^2 + lambda ||a||_1.

Coordinate descent works on the Gram matrix G = B^T B and the correlations c = B^T y, both of which are shared by
every column of a batch when B is fixed (a dictionary, or a projected dictionary). The kernels are plain loops
compiled with numba; they never reorder floating point sums, so a column's result does not depend on how the batch
around it is partitioned or how many threads run.
"""

from typing import Optional, Sequence
from concurrent.futures import ThreadPoolExecutor
from numba import njit
from em_superres.exceptions import ColumnSolveError, ConvergenceWarning, NonFiniteValueError, ShapeMismatchError
from em_superres.helpers import chunked
from em_superres.models import SolverConfig, SparseCode
import numpy as np
import logging
import warnings

logger = logging.getLogger("em_superres_solver")

DEFAULT_CHUNK = 256
REFINE_EVERY = 50


@njit(cache=True, nogil=True)
def _correlate(B, y, out):
    m, k = B.shape
    for j in range(k):
        out[j] = 0.0
    for i in range(m):
        yi = y[i]
        if yi != 0.0:
            for j in range(k):
                out[j] += B[i, j] * yi


@njit(cache=True, nogil=True)
def _residual(B, a, y, out):
    m, k = B.shape
    for i in range(m):
        acc = 0.0
        for j in range(k):
            if a[j] != 0.0:
                acc += B[i, j] * a[j]
        out[i] = y[i] - acc


@njit(cache=True, nogil=True)
def _kkt_satisfied(G, c, a, q, lam, kkt_tol):
    """
    Refresh q = c - G a and check the optimality conditions against it.
    """

    k = c.shape[0]
    for i in range(k):
        q[i] = c[i]
    for j in range(k):
        aj = a[j]
        if aj != 0.0:
            for i in range(k):
                q[i] -= G[i, j] * aj
    for j in range(k):
        if a[j] > 0.0:
            if abs(q[j] - lam) > kkt_tol:
                return False
        elif a[j] < 0.0:
            if abs(q[j] + lam) > kkt_tol:
                return False
        elif abs(q[j]) > lam + kkt_tol:
            return False
    return True


@njit(cache=True, nogil=True)
def _coordinate_descent(G, c, a, lam, max_iter, tol, kkt_tol, yty, history):
    """
    Cyclic coordinate descent with exact soft-threshold updates. ``a`` is updated in place.

    q = c - G a is kept current, so the objective is 1/2 y^T y - 1/2 a^T (c + q) + lam ||a||_1. A sweep whose
    largest change is below ``tol`` ends the run only when the optimality conditions hold within ``kkt_tol``.
    """

    k = c.shape[0]
    q = c.copy()
    for j in range(k):
        aj = a[j]
        if aj != 0.0:
            for i in range(k):
                q[i] -= G[i, j] * aj

    record = history.shape[0] > 0
    sweeps = 0
    converged = False
    for sweep in range(max_iter):
        sweeps = sweep + 1
        max_change = 0.0
        for j in range(k):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = a[j]
            rho = q[j] + gjj * old
            # |rho| == lam resolves to zero
            if rho > lam:
                new = (rho - lam) / gjj
            elif rho < -lam:
                new = (rho + lam) / gjj
            else:
                new = 0.0
            delta = new - old
            if delta != 0.0:
                a[j] = new
                for i in range(k):
                    q[i] -= G[i, j] * delta
                if abs(delta) > max_change:
                    max_change = abs(delta)

        if record:
            value = 0.5 * yty
            for j in range(k):
                value += -0.5 * a[j] * (c[j] + q[j]) + lam * abs(a[j])
            history[sweep] = value

        if max_change < tol and _kkt_satisfied(G, c, a, q, lam, kkt_tol):
            converged = True
            break

    return sweeps, converged


def soft_threshold(x: np.ndarray, threshold: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def lasso_objective(B: np.ndarray, y: np.ndarray, coeffs: np.ndarray, lambda_: float) -> float:
    residual = y - B @ coeffs
    return float(0.5 * residual @ residual + lambda_ * np.abs(coeffs).sum())


def kkt_violation(correlation: np.ndarray, coeffs: np.ndarray, lambda_: float) -> float:
    """
    Largest violation of the lasso optimality conditions given B^T (y - Ba).

    Nonzero coefficients need B_j^T r = lambda sign(a_j), zero coefficients need |B_j^T r| <= lambda.
    """

    active = coeffs != 0.0
    violation = 0.0
    if active.any():
        violation = float(np.max(np.abs(correlation[active] - lambda_ * np.sign(coeffs[active]))))
    if (~active).any():
        violation = max(violation, float(np.max(np.abs(correlation[~active]) - lambda_, initial=0.0)))
    return max(violation, 0.0)


def _objective(gram: np.ndarray, correlation: np.ndarray, coeffs: np.ndarray, lambda_: float, yty: float) -> float:
    return float(0.5 * yty - coeffs @ correlation + 0.5 * coeffs @ (gram @ coeffs) + lambda_ * np.abs(coeffs).sum())


def kkt_tolerance(config: SolverConfig) -> float:
    """
    Allowed optimality violation: tol * lambda, or tol itself for lambda = 0.
    """

    return config.tol * config.lambda_ if config.lambda_ > 0.0 else config.tol


def _check_inputs(B: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    B = np.ascontiguousarray(B, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)

    if B.ndim != 2 or B.shape[0] < 1 or B.shape[1] < 1:
        raise ShapeMismatchError(f"operator must be a non-empty matrix, got shape {B.shape}")
    if Y.shape[0] != B.shape[0]:
        raise ShapeMismatchError(f"measurements have {Y.shape[0]} rows, operator has {B.shape[0]}")
    if not np.all(np.isfinite(B)):
        raise NonFiniteValueError("operator contains non-finite entries")

    return B, Y


class BatchSolution:
    """
    Column-wise lasso results stored as arrays.

    Attributes:
        coeffs: (k, count) coefficients
        objectives: (count,) objective values
        converged: (count,) convergence flags
        iterations: (count,) sweeps used
        kkt: (count,) KKT violations
        histories: Objective traces per column when requested
    """

    def __init__(self, k: int, count: int, record: bool):
        self.coeffs = np.zeros((k, count), dtype=np.float64)
        self.objectives = np.zeros(count, dtype=np.float64)
        self.converged = np.ones(count, dtype=bool)
        self.iterations = np.zeros(count, dtype=np.int64)
        self.kkt = np.zeros(count, dtype=np.float64)
        self.histories: Optional[list[Optional[tuple[float, ...]]]] = [None] * count if record else None

    @property
    def nonconverged(self) -> int:
        return int(np.count_nonzero(~self.converged))

    def code(self, column: int, lambda_: float) -> SparseCode:
        coeffs = self.coeffs[:, column]
        return SparseCode(
            coeffs=coeffs,
            lambda_=lambda_,
            objective=float(self.objectives[column]),
            n_nonzero=int(np.count_nonzero(coeffs)),
            converged=bool(self.converged[column]),
            iterations=int(self.iterations[column]),
            kkt_violation=float(self.kkt[column]),
            history=self.histories[column] if self.histories is not None else None,
        )


class LassoSolver:
    """
    Solves lasso problems that share one operator B.

    The Gram matrix and, for proximal gradient, its largest eigenvalue are computed once and reused for every
    column. Columns are independent: ``solve`` may split them over worker threads without changing any result.
    """

    def __init__(self, B: np.ndarray, config: SolverConfig, *, gram: Optional[np.ndarray] = None):
        B, _ = _check_inputs(B, np.zeros(np.shape(B)[0]))
        self.B = B
        self.config = config
        self.gram = np.ascontiguousarray(B.T @ B) if gram is None else np.ascontiguousarray(gram, dtype=np.float64)
        self._lipschitz: Optional[float] = None

    @property
    def k(self) -> int:
        return self.B.shape[1]

    @property
    def lipschitz(self) -> float:
        if self._lipschitz is None:
            self._lipschitz = float(np.linalg.eigvalsh(self.gram)[-1])
        return self._lipschitz

    def _refine(self, a: np.ndarray, correlation: np.ndarray, tolerance: float, yty: float) -> Optional[float]:
        """
        Solve the optimality conditions exactly on the support and signs of ``a``.

        G_SS a_S = c_S - lambda sign(a_S) is accepted when it keeps the signs, satisfies the optimality conditions
        within ``tolerance`` and does not raise the objective. ``a`` is overwritten then and the new objective is
        returned; otherwise ``a`` is left untouched and None is returned.
        """

        lambda_ = self.config.lambda_
        support = np.flatnonzero(a)
        if support.size == 0 or support.size > self.B.shape[0]:
            return None

        signs = np.sign(a[support])
        try:
            values = np.linalg.solve(self.gram[np.ix_(support, support)], correlation[support] - lambda_ * signs)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(values)) or np.any(np.sign(values) != signs):
            return None

        candidate = np.zeros_like(a)
        candidate[support] = values
        if kkt_violation(correlation - self.gram @ candidate, candidate, lambda_) > tolerance:
            return None

        refined = _objective(self.gram, correlation, candidate, lambda_, yty)
        if refined > _objective(self.gram, correlation, a, lambda_, yty):
            return None
        a[:] = candidate
        return refined

    def _descend(self, correlation: np.ndarray, a: np.ndarray, yty: float, history: np.ndarray) -> tuple[int, bool]:
        """
        Coordinate descent in rounds of REFINE_EVERY sweeps, with an exact support refinement between rounds.

        A successful refinement counts as one iteration and is recorded in the history.
        """

        config = self.config
        tolerance = kkt_tolerance(config)
        done, converged = 0, False
        while done < config.max_iter and not converged:
            budget = min(REFINE_EVERY, config.max_iter - done)
            sweeps, converged = _coordinate_descent(
                self.gram,
                correlation,
                a,
                config.lambda_,
                budget,
                config.tol,
                tolerance,
                yty,
                history[done : done + budget],
            )
            done += sweeps
            if converged or done >= config.max_iter:
                break

            refined = self._refine(a, correlation, tolerance, yty)
            if refined is not None:
                if history.shape[0]:
                    history[done] = refined
                done += 1
                converged = True

        return done, converged

    def _solve_one(self, y: np.ndarray, initial: Optional[np.ndarray], out: BatchSolution, column: int) -> None:
        config = self.config
        lambda_ = config.lambda_

        if not np.all(np.isfinite(y)):
            raise ColumnSolveError("measurements contain non-finite values", column=column)

        a = np.zeros(self.k, dtype=np.float64) if initial is None else np.array(initial, dtype=np.float64)
        if a.shape != (self.k,):
            raise ColumnSolveError(f"initial coefficients have shape {a.shape}, expected ({self.k},)", column=column)

        correlation = np.empty(self.k, dtype=np.float64)
        _correlate(self.B, y, correlation)
        history = np.zeros(config.max_iter if config.record_history else 0, dtype=np.float64)

        if config.algorithm == "coordinate_descent":
            sweeps, converged = self._descend(correlation, a, float(y @ y), history)
        else:
            sweeps, converged = self._proximal_gradient(correlation, a, float(y @ y), history)

        residual = np.empty(self.B.shape[0], dtype=np.float64)
        _residual(self.B, a, y, residual)
        _correlate(self.B, residual, correlation)

        out.coeffs[:, column] = a
        out.objectives[column] = 0.5 * float(residual @ residual) + lambda_ * float(np.abs(a).sum())
        out.converged[column] = converged
        out.iterations[column] = sweeps
        out.kkt[column] = kkt_violation(correlation, a, lambda_)
        if out.histories is not None:
            out.histories[column] = tuple(history[:sweeps].tolist())

    def _proximal_gradient(
        self, correlation: np.ndarray, a: np.ndarray, yty: float, history: np.ndarray
    ) -> tuple[int, bool]:
        """
        Accelerated proximal gradient (FISTA) with step 1/L, L the largest eigenvalue of B^T B.

        Once the step falls below ``tol`` the optimality conditions are checked, with the exact support refinement
        as a fallback.
        """

        config = self.config
        lambda_ = config.lambda_
        tolerance = kkt_tolerance(config)
        lipschitz = self.lipschitz
        if lipschitz <= 0.0:
            a[:] = 0.0
            return 1, True

        step = 1.0 / lipschitz
        momentum = a.copy()
        t = 1.0
        for iteration in range(config.max_iter):
            gradient = self.gram @ momentum - correlation
            updated = soft_threshold(momentum - step * gradient, step * lambda_)
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            momentum = updated + ((t - 1.0) / t_next) * (updated - a)
            change = float(np.max(np.abs(updated - a)))
            a[:] = updated
            t = t_next

            if history.shape[0]:
                history[iteration] = _objective(self.gram, correlation, a, lambda_, yty)
            if change < config.tol:
                if kkt_violation(correlation - self.gram @ a, a, lambda_) <= tolerance:
                    return iteration + 1, True
                if self._refine(a, correlation, tolerance, yty) is not None:
                    return iteration + 1, True

        return config.max_iter, False

    def solve(
        self,
        Y: np.ndarray,
        *,
        initial: Optional[np.ndarray] = None,
        workers: int = 1,
        chunk_size: int = DEFAULT_CHUNK,
        warn: bool = True,
    ) -> BatchSolution:
        """
        Solve every column of Y.

        Args:
            Y: (m, count) measurements
            initial: Optional (k, count) warm start
            workers: Threads to spread the column chunks over
            chunk_size: Columns per work item
            warn: Emit a ConvergenceWarning when a column hits the iteration cap
        """

        _, Y = _check_inputs(self.B, Y)
        if Y.ndim != 2:
            raise ShapeMismatchError(f"batch measurements must be (m, count), got shape {Y.shape}")

        count = Y.shape[1]
        out = BatchSolution(self.k, count, self.config.record_history)

        def run(block: slice) -> None:
            for column in range(block.start, block.stop):
                start = None if initial is None else initial[:, column]
                self._solve_one(np.ascontiguousarray(Y[:, column]), start, out, column)

        blocks = list(chunked(count, chunk_size))
        if workers > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(run, blocks))
        else:
            for block in blocks:
                run(block)

        if out.nonconverged and warn:
            logger.warning(f"{out.nonconverged} of {count} lasso problems hit the cap of {self.config.max_iter}")
            warnings.warn(f"{out.nonconverged} lasso problems did not converge", ConvergenceWarning, stacklevel=2)

        return out


def lasso_solve(
    B: np.ndarray, y: np.ndarray, config: SolverConfig, *, initial: Optional[np.ndarray] = None
) -> SparseCode:
    """
    Solve min_a 1/2 ||y - Ba||^2 + lambda ||a||_1 for one measurement vector.

    Args:
        B: (m, k) operator
        y: (m,) measurements
        config: Solver settings
        initial: Optional warm start, zeros by default
    """

    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ShapeMismatchError(f"measurements must be a vector, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise NonFiniteValueError("measurements contain non-finite values")

    solver = LassoSolver(B, config)
    start = None if initial is None else np.asarray(initial, dtype=np.float64)[:, None]
    solution = solver.solve(y[:, None], initial=start)
    return solution.code(0, config.lambda_)


def lasso_solve_batch(
    B: np.ndarray,
    Y: np.ndarray,
    config: SolverConfig,
    *,
    initial: Optional[np.ndarray] = None,
    workers: int = 1,
) -> list[SparseCode]:
    """
    Column-wise lasso_solve. Results do not depend on the batch partitioning or the worker count.
    """

    solution = LassoSolver(B, config).solve(np.asarray(Y, dtype=np.float64), initial=initial, workers=workers)
    return [solution.code(column, config.lambda_) for column in range(solution.coeffs.shape[1])]


def stack_codes(codes: Sequence[SparseCode]) -> np.ndarray:
    """
    (k, count) coefficient matrix of a list of codes.
    """

    if not codes:
        raise ShapeMismatchError("no codes to stack")
    return np.stack([code.coeffs for code in codes], axis=1)
