from tests.test_data import LoggingSetup, lasso_oracle, unit_columns
from em_superres import SolverConfig, lasso_solve, lasso_solve_batch
from em_superres.exceptions import ColumnSolveError, ConvergenceWarning, NonFiniteValueError, ShapeMismatchError
from em_superres.solver import LassoSolver, kkt_tolerance, kkt_violation, lasso_objective, soft_threshold
import numpy as np
import pytest
import warnings

TIGHT = SolverConfig(tol=1e-12, max_iter=200000)


def _problem(m: int, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return unit_columns(rng.standard_normal((m, k))), rng.standard_normal(m)


class TestSolver(LoggingSetup):
    def test_zero_measurements(self):
        B, _ = _problem(8, 5, 0)
        code = lasso_solve(B, np.zeros(8), SolverConfig())

        assert code.n_nonzero == 0
        assert code.objective == 0.0
        assert code.converged

    def test_identity_closed_form(self):
        code = lasso_solve(np.eye(2), np.array([1.0, 0.05]), SolverConfig(lambda_=0.1))

        assert code.coeffs[0] == pytest.approx(0.9, abs=1e-12)
        assert code.coeffs[1] == 0.0
        assert np.allclose(soft_threshold(np.array([1.0, 0.05, -0.3]), 0.1), [0.9, 0.0, -0.2], atol=1e-15)

    def test_large_lambda_gives_zero(self):
        B, y = _problem(12, 6, 1)
        lambda_ = float(np.max(np.abs(B.T @ y)))
        code = lasso_solve(B, y, SolverConfig(lambda_=lambda_))

        assert code.n_nonzero == 0
        assert code.objective == pytest.approx(0.5 * float(y @ y))

    @pytest.mark.parametrize("seed", range(200))
    def test_matches_enumeration(self, seed):
        B, y = _problem(4 + seed % 3, 6 + seed % 3, 100 + seed)
        lambda_ = (0.05 + 0.4 * (seed % 7) / 6) * float(np.max(np.abs(B.T @ y)))
        code = lasso_solve(B, y, TIGHT.with_lambda(lambda_))

        assert code.objective <= lasso_oracle(B, y, lambda_) + 1e-6
        assert code.objective == pytest.approx(lasso_objective(B, y, code.coeffs, lambda_), abs=1e-12)

    def test_optimality_conditions(self):
        B, y = _problem(48, 64, 2)
        lambda_ = 0.1 * float(np.max(np.abs(B.T @ y)))
        code = lasso_solve(B, y, TIGHT.with_lambda(lambda_))

        assert code.converged
        assert code.kkt_violation <= 1e-6
        assert kkt_violation(B.T @ (y - B @ code.coeffs), code.coeffs, lambda_) <= 1e-6
        assert 0 < code.n_nonzero <= 48

    @pytest.mark.parametrize("seed", range(200))
    def test_optimality_conditions_wide(self, seed):
        B, y = _problem(48, 64, 1000 + seed)
        lambda_ = 0.1 * float(np.max(np.abs(B.T @ y)))
        code = lasso_solve(B, y, SolverConfig(lambda_=lambda_, tol=1e-9, max_iter=200000))

        assert code.converged
        assert code.kkt_violation <= 1e-6

    def test_converged_means_optimal(self):
        rng = np.random.default_rng(12)
        B = unit_columns(rng.standard_normal((20, 30)))
        Y = rng.standard_normal((20, 200))
        config = SolverConfig(lambda_=0.05)

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            solution = LassoSolver(B, config).solve(Y)

        assert solution.nonconverged <= 10
        assert np.all(solution.kkt[solution.converged] <= kkt_tolerance(config) + 1e-12)

    def test_kkt_tolerance(self):
        assert kkt_tolerance(SolverConfig(lambda_=0.5, tol=1e-6)) == pytest.approx(5e-7)
        assert kkt_tolerance(SolverConfig(lambda_=0.0, tol=1e-6)) == 1e-6

    def test_scale_invariance(self):
        B, y = _problem(30, 10, 3)
        single = lasso_solve(B, y, TIGHT.with_lambda(0.3))
        double = lasso_solve(B, 2.0 * y, TIGHT.with_lambda(0.6))

        assert np.allclose(double.coeffs, 2.0 * single.coeffs, atol=1e-7)

    def test_objective_history(self):
        B, y = _problem(20, 40, 4)
        code = lasso_solve(B, y, SolverConfig(lambda_=0.05, tol=1e-10, max_iter=5000, record_history=True))

        history = np.asarray(code.history)
        assert len(history) == code.iterations
        assert np.all(np.diff(history) <= 1e-12 * np.abs(history[:-1]) + 1e-14)
        assert history[-1] == pytest.approx(code.objective, rel=1e-9)

    def test_warm_start(self):
        B, y = _problem(30, 15, 5)
        config = TIGHT.with_lambda(0.2)
        cold = lasso_solve(B, y, config)
        warm = lasso_solve(B, y, config, initial=cold.coeffs)

        assert warm.iterations <= 2
        assert np.allclose(warm.coeffs, cold.coeffs, atol=1e-10)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(6)
        B = unit_columns(rng.standard_normal((16, 24)))
        Y = rng.standard_normal((16, 7))
        Y[:, 4] = Y[:, 1]
        config = SolverConfig(lambda_=0.1)

        codes = lasso_solve_batch(B, Y, config)
        for column, code in enumerate(codes):
            assert np.array_equal(code.coeffs, lasso_solve(B, Y[:, column], config).coeffs)
        assert np.array_equal(codes[1].coeffs, codes[4].coeffs)

        first = lasso_solve_batch(B, Y[:, :3], config)
        second = lasso_solve_batch(B, Y[:, 3:], config)
        assert all(np.array_equal(a.coeffs, b.coeffs) for a, b in zip(first + second, codes))

    def test_workers_do_not_change_results(self):
        rng = np.random.default_rng(7)
        B = unit_columns(rng.standard_normal((20, 30)))
        Y = rng.standard_normal((20, 23))
        solver = LassoSolver(B, SolverConfig(lambda_=0.05))

        serial = solver.solve(Y)
        threaded = solver.solve(Y, workers=3, chunk_size=2)
        assert np.array_equal(serial.coeffs, threaded.coeffs)
        assert np.array_equal(serial.objectives, threaded.objectives)

    def test_proximal_gradient_agrees(self):
        B, y = _problem(30, 10, 8)
        descent = lasso_solve(B, y, TIGHT.with_lambda(0.5))
        fista = lasso_solve(B, y, TIGHT.with_lambda(0.5).model_copy(update={"algorithm": "proximal_gradient"}))

        assert fista.converged
        assert fista.objective == pytest.approx(descent.objective, abs=1e-8)

    def test_zero_operator_column(self):
        B, y = _problem(10, 4, 9)
        B[:, 2] = 0.0
        code = lasso_solve(B, y, SolverConfig(lambda_=0.01))

        assert code.coeffs[2] == 0.0

    def test_iteration_cap(self):
        rng = np.random.default_rng(10)
        shared = rng.standard_normal((30, 1))
        B = unit_columns(shared + 0.1 * rng.standard_normal((30, 20)))
        y = rng.standard_normal(30)

        with pytest.warns(ConvergenceWarning):
            code = lasso_solve(B, y, SolverConfig(lambda_=1e-3, max_iter=1))
        assert not code.converged
        assert code.iterations == 1

    def test_invalid_inputs(self):
        B, y = _problem(6, 4, 11)

        bad = y.copy()
        bad[2] = np.inf
        with pytest.raises(NonFiniteValueError):
            lasso_solve(B, bad, SolverConfig())

        broken = B.copy()
        broken[0, 0] = np.nan
        with pytest.raises(NonFiniteValueError):
            lasso_solve(broken, y, SolverConfig())

        with pytest.raises(ShapeMismatchError):
            lasso_solve(B, y[:5], SolverConfig())

        Y = np.tile(y[:, None], (1, 5))
        Y[1, 3] = np.nan
        with pytest.raises(ColumnSolveError) as info:
            lasso_solve_batch(B, Y, SolverConfig())
        assert info.value.column == 3
