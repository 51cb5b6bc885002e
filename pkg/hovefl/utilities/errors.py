"""
Structured exceptions raised across the simulator.

Every error carries the fields a caller needs to report where things went wrong
(coordinate, row/column, device, round, ...) in addition to a readable message.
"""
from typing_extensions import Self


class HoVeFLError(Exception):
    """Base class for all simulator errors."""


class DimensionMismatchError(HoVeFLError, ValueError):
    def __init__(self, expected: int, actual: int, what: str = "vector"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what} dimension mismatch: expected {expected}, got {actual}")


class NonFiniteError(HoVeFLError, ArithmeticError):
    def __init__(self, message: str, coordinate: int | None = None):
        self.coordinate = coordinate
        super().__init__(message)


class DataFormatError(HoVeFLError, ValueError):
    """
    Raised while ingesting tabular data.

    Attributes:
        row (int | None): 1-based line number in the source file (header is line 1)
        column (str | None): offending column name
    """

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        location = []
        if row is not None:
            location.append(f"line {row}")
        if column is not None:
            location.append(f"column '{column}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)


class EmptyDatasetError(DataFormatError):
    def __init__(self, path: str):
        super().__init__(f"empty dataset: {path} has a header but no rows", row=1)


class InfeasiblePartitionError(HoVeFLError, ValueError):
    pass


class CoverageError(HoVeFLError, ValueError):
    def __init__(self, coordinates: list[int]):
        self.coordinates = coordinates
        shown = coordinates[:10]
        more = "" if len(coordinates) <= 10 else f" (+{len(coordinates) - 10} more)"
        super().__init__(f"global coordinates without any contributing device: {shown}{more}")


class LabelError(HoVeFLError, ValueError):
    def __init__(self, label, n_classes: int):
        self.label = label
        self.n_classes = n_classes
        super().__init__(f"label {label!r} out of range for {n_classes} classes")


class EmptyShardError(HoVeFLError, ValueError):
    pass


class SingularSystemError(HoVeFLError, ArithmeticError):
    pass


class DivergenceError(HoVeFLError, RuntimeError):
    def __init__(self, device_id: int, iteration: int, round: int | None = None):
        self.device_id = device_id
        self.iteration = iteration
        self.round = round
        super().__init__(self._message())

    def _message(self) -> str:
        where = f"device {self.device_id}, local iteration {self.iteration}"
        if self.round is not None:
            where = f"round {self.round}, {where}"
        return f"training diverged (non-finite loss) at {where}"

    def at_round(self, round: int) -> Self:
        self.round = round
        self.args = (self._message(),)
        return self


class EstimationFailedError(HoVeFLError, RuntimeError):
    pass


class BoundOverflowError(HoVeFLError, ArithmeticError):
    def __init__(self, t: int):
        self.t = t
        super().__init__(f"bound evaluation produced a non-finite value at t={t}")


class MissingTraceError(HoVeFLError, ValueError):
    def __init__(self, round: int, field: str):
        self.round = round
        self.field = field
        super().__init__(f"round {round} has no recorded '{field}' trace")


class ConfigError(HoVeFLError, ValueError):
    """
    Invalid configuration.

    Attributes:
        field (str | None): dotted path of the offending key, e.g. "train.mu"
        line (int | None): line in the config file where the key appears
    """

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field is not None:
            prefix += f"{field}: "
        super().__init__(prefix + message)
