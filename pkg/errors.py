"""Error types raised by the wildreid modules.

Library code raises these and never exits; ``main.py`` maps them to exit status 1.
"""
from typing import Iterable, Optional


class WildReidError(Exception):
    """Base class for every domain error."""


class SchemaError(WildReidError):
    def __init__(self, column: str, message: Optional[str] = None):
        self.column = column
        super().__init__(message or f"Missing mandatory column '{column}'")


class IngestionError(WildReidError):
    def __init__(self, message: str, line: int = 0, image_id: Optional[str] = None):
        self.line = line
        self.image_id = image_id
        super().__init__(f"line {line}: {message}" if line else message)


class EmptyInputError(WildReidError):
    pass


class SplitPreconditionError(WildReidError):
    pass


class InfeasibleSplitError(WildReidError):
    pass


class UnknownImageError(WildReidError):
    def __init__(self, image_ids: Iterable[str]):
        self.image_ids = sorted(image_ids)
        preview = ", ".join(self.image_ids[:5])
        super().__init__(f"{len(self.image_ids)} unknown image id(s): {preview}")


class ShapeError(WildReidError):
    pass


class PreconditionError(WildReidError):
    pass


class DegenerateRowError(WildReidError):
    def __init__(self, row: int, row_id: Optional[str] = None):
        self.row = row
        self.row_id = row_id
        label = f" ('{row_id}')" if row_id is not None else ""
        super().__init__(f"Row {row}{label} has zero or non-finite norm")


class AlignmentError(WildReidError):
    pass


class FormatError(WildReidError):
    pass


class CalibrationError(WildReidError):
    pass


class LabelError(WildReidError, IndexError):
    pass


class TrainingDivergedError(WildReidError):
    def __init__(self, epoch: int, reason: str, trace=None):
        self.epoch = epoch
        self.reason = reason
        self.trace = list(trace or [])
        super().__init__(f"Training diverged at epoch {epoch}: {reason}")


class GridSpecError(WildReidError):
    pass
