from typing import Any, Literal, Optional

from typing_extensions import Self
from pydantic import Field, field_validator, model_validator
from em_superres.base_models import ArrayModel, BaseModel, frozen_array
from em_superres.fields import NonNegativeFloat, PositiveFloat, PositiveInt
import numpy as np


class SolverConfig(BaseModel):
    """
    Settings for min_a 1/2 ||y - Ba||^2 + lambda ||a||_1.

    Attributes:
        lambda_: Regularization weight
        max_iter: Sweep cap (coordinate descent) or iteration cap (proximal gradient)
        tol: Stop once the largest per-coordinate change of a sweep is below this value and the optimality
            conditions hold within tol * lambda
        algorithm: "coordinate_descent" (default) or "proximal_gradient"
        record_history: Keep the objective after every sweep
    """

    lambda_: NonNegativeFloat = Field(0.1, alias="lambda")
    max_iter: PositiveInt = 1000
    tol: PositiveFloat = 1e-7
    algorithm: Literal["coordinate_descent", "proximal_gradient"] = "coordinate_descent"
    record_history: bool = False

    def with_lambda(self, lambda_: float) -> "SolverConfig":
        return self.model_copy(update={"lambda_": lambda_})


class SparseCode(ArrayModel):
    """
    Solution of one lasso problem.

    Attributes:
        coeffs: Coefficient vector, one entry per operator column
        lambda_: Regularization weight used
        objective: 1/2 ||y - Ba||^2 + lambda ||a||_1 at coeffs
        n_nonzero: Number of structurally nonzero coefficients
        converged: True when the optimality conditions hold within tol * lambda, False when the cap was hit first
        iterations: Sweeps (or iterations) performed
        kkt_violation: Largest violation of the lasso optimality conditions at coeffs
        history: Objective after each sweep, when requested
    """

    coeffs: np.ndarray
    lambda_: float = Field(alias="lambda")
    objective: float = Field(ge=0.0)
    n_nonzero: int = Field(ge=0)
    converged: bool = True
    iterations: int = 0
    kkt_violation: float = 0.0
    history: Optional[tuple[float, ...]] = None

    @field_validator("coeffs", mode="before")
    @classmethod
    def _freeze(cls, value: Any) -> np.ndarray:
        return frozen_array(value)

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.coeffs.ndim != 1:
            raise ValueError(f"coeffs must be a vector, got shape {self.coeffs.shape}")
        if self.n_nonzero != int(np.count_nonzero(self.coeffs)):
            raise ValueError("n_nonzero does not match the coefficient vector")
        return self

    @property
    def k(self) -> int:
        return self.coeffs.shape[0]
