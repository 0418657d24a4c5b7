from pydantic import BaseModel as _BaseModel
from pydantic import ConfigDict
from typing import Any
import numpy as np
import json


def _json_default(value: Any):
    if isinstance(value, np.ndarray):
        return {"shape": list(value.shape), "dtype": str(value.dtype)}
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def prettyprint(model: dict):
    return json.dumps(model, indent=4, default=_json_default)


class BaseModel(_BaseModel):
    """
    Represents a base model class with configuration settings and utility methods.

    Every configuration record of the package derives from this class. Unknown keys are rejected so a
    misspelled option in a JSON config file fails validation instead of being silently ignored.

    Attributes:
        model_config (ConfigDict): Configuration dictionary for the model.
            - 'populate_by_name': fields may be populated by name or alias.
            - 'extra': "forbid", unknown keys raise a ValidationError.

    Methods:
        prettyprint: Serializes the model into a pretty-printed JSON string.
    """

    model_config = ConfigDict(populate_by_name=True, extra="forbid", ser_json_inf_nan="constants")

    def prettyprint(self, *, exclude_none: bool = False):
        return prettyprint(self.model_dump(mode="json", exclude_none=exclude_none))


class ArrayModel(_BaseModel):
    """
    Base for immutable records that carry numpy arrays.

    Arrays are validated once at construction and flagged read-only, which makes the records safe to share
    between worker threads.
    """

    model_config = ConfigDict(populate_by_name=True, arbitrary_types_allowed=True, frozen=True)

    def prettyprint(self):
        return prettyprint(self.model_dump())


def frozen_array(value: Any, *, dtype=np.float64) -> np.ndarray:
    """
    Return a read-only contiguous copy of value with the requested dtype.
    """

    array = np.array(value, dtype=dtype, order="C", copy=True)
    array.setflags(write=False)
    return array
