"""
Reusable annotated field types shared by the data models.
"""

from typing import Annotated
from pydantic import AfterValidator, Field
import math


def _finite(value: float) -> float:
    if not math.isfinite(value):
        raise ValueError(f"value must be finite, got {value}")
    return value


def _snr(value: float) -> float:
    if math.isnan(value) or value == -math.inf:
        raise ValueError(f"snr must be finite or +inf, got {value}")
    return value


FiniteFloat = Annotated[float, AfterValidator(_finite)]
NonNegativeFloat = Annotated[float, Field(ge=0.0), AfterValidator(_finite)]
PositiveFloat = Annotated[float, Field(gt=0.0), AfterValidator(_finite)]
PositiveInt = Annotated[int, Field(ge=1)]

# +inf is the noiseless sentinel
SnrDb = Annotated[float, AfterValidator(_snr)]

Triple = tuple[int, int, int]
PositiveTriple = tuple[PositiveInt, PositiveInt, PositiveInt]
FloatTriple = tuple[PositiveFloat, PositiveFloat, PositiveFloat]
