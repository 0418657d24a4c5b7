from typing import Any, Literal, Optional

from typing_extensions import Self
from pydantic import Field, field_validator, model_validator
from em_superres.base_models import ArrayModel, BaseModel, frozen_array
from em_superres.fields import NonNegativeFloat, PositiveInt
from em_superres.models.volume import PatchSpec
import numpy as np

UNIT_NORM_TOL = 1e-10


class LearnConfig(BaseModel):
    """
    Dictionary training settings.

    Attributes:
        k: Atom count; 2n reproduces the twice over-complete setting
        lambda_: lambda of the coding step
        n_epochs: Alternation budget (one coding pass plus one dictionary pass per epoch)
        batch_size: Mini-batch size for the online mode
        seed: Seed for atom initialization and mini-batch order
        init: "random_patches" draws k distinct nonzero training patches, "provided" starts from a given dictionary
        mode: "batch" alternates over the full training set, "online" accumulates mini-batch statistics
        plateau_tol: Stop early once an epoch lowers the objective by less than this relative amount
        atom_passes: Block coordinate descent passes over the atoms per dictionary update
        center: Remove the per-patch mean before training
    """

    k: PositiveInt = 2430
    lambda_: NonNegativeFloat = Field(0.1, alias="lambda")
    n_epochs: PositiveInt = 10
    batch_size: PositiveInt = 256
    seed: int = Field(0, ge=0)
    init: Literal["random_patches", "provided"] = "random_patches"
    mode: Literal["batch", "online"] = "batch"
    plateau_tol: NonNegativeFloat = 1e-5
    atom_passes: PositiveInt = 1
    center: bool = False
    solver_tol: float = Field(1e-7, gt=0.0)
    solver_max_iter: PositiveInt = 1000


class DictionaryProvenance(BaseModel):
    """
    Training metadata stored with a dictionary.
    """

    lambda_: float = Field(0.1, alias="lambda")
    iterations: int = 0
    dataset_hash: Optional[str] = None
    objective_trace: list[float] = Field(default_factory=list)
    mean_active_atoms: Optional[float] = None
    mean_relative_error: Optional[float] = None
    replaced_atoms: int = 0


class Dictionary(ArrayModel):
    """
    Column-normalized atom matrix with its patch geometry.

    Attributes:
        spec: Patch geometry of the atoms
        atoms: (n, k) matrix, every column of unit Euclidean norm
        provenance: Training metadata
    """

    spec: PatchSpec
    atoms: np.ndarray = Field(repr=False)
    provenance: DictionaryProvenance = Field(default_factory=DictionaryProvenance)

    @field_validator("atoms", mode="before")
    @classmethod
    def _freeze(cls, value: Any) -> np.ndarray:
        return frozen_array(value)

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.atoms.ndim != 2 or self.atoms.shape[0] != self.spec.n:
            raise ValueError(f"atoms shape {self.atoms.shape} does not have n = {self.spec.n} rows")
        if self.atoms.shape[1] < 1:
            raise ValueError("a dictionary needs at least one atom")
        if not np.all(np.isfinite(self.atoms)):
            raise ValueError("atoms must be finite")
        deviation = float(np.max(np.abs(np.linalg.norm(self.atoms, axis=0) - 1.0)))
        if deviation > UNIT_NORM_TOL:
            raise ValueError(f"atom norms deviate from 1 by {deviation:.3e}")
        return self

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def k(self) -> int:
        return self.atoms.shape[1]

    def decode(self, coeffs: np.ndarray) -> np.ndarray:
        return self.atoms @ coeffs
