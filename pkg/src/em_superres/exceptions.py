class EmSuperResError(Exception): ...


class ConfigurationError(EmSuperResError): ...


class DataError(EmSuperResError): ...


class DimensionTooSmallError(DataError): ...


class CoverageGapError(DataError): ...


class MalformedHeaderError(DataError): ...


class PayloadLengthError(DataError): ...


class NonFiniteValueError(DataError): ...


class NormViolationError(DataError): ...


class ShapeMismatchError(DataError): ...


class MissingAngleError(ShapeMismatchError): ...


class DegenerateDataError(DataError): ...


class OriginOutOfRangeError(DataError): ...


class ColumnSolveError(DataError):
    def __init__(self, message: str, *, column: int):
        super().__init__(f"column {column}: {message}")
        self.column = column


class ConvergenceWarning(UserWarning): ...
