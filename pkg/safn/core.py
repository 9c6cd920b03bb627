from __future__ import annotations
from dataclasses import dataclass
from enum import Enum
from typing import Generic, TypeVar, Callable

T = TypeVar("T")
E = TypeVar("E")
U = TypeVar("U")


class Modality(str, Enum):
    MRI_CT = "mri_ct"
    CLINICAL = "clinical"
    MRI_VOL = "mri_vol"
    DEMOGRAPHIC = "demographic"

    @property
    def tokenized(self) -> bool:
        return self in (Modality.MRI_CT, Modality.CLINICAL)


# Fusion order: gate index j follows this tuple.
FUSION_ORDER: tuple[Modality, ...] = (
    Modality.MRI_CT,
    Modality.CLINICAL,
    Modality.MRI_VOL,
    Modality.DEMOGRAPHIC,
)

# Block widths of the reference cohort.
DEFAULT_BLOCK_WIDTHS: dict[Modality, int] = {
    Modality.MRI_CT: 70,
    Modality.MRI_VOL: 13,
    Modality.CLINICAL: 409,
    Modality.DEMOGRAPHIC: 7,
}


def parse_modality(value: str | Modality) -> Modality:
    if isinstance(value, Modality):
        return value
    try:
        return Modality(value)
    except ValueError:
        valid = ", ".join(m.value for m in Modality)
        raise DataError(f"Unknown modality '{value}' (expected one of: {valid})") from None


class SafnError(Exception):
    pass


class DataError(SafnError, ValueError):
    def __init__(self, message: str, column: str | None = None):
        super().__init__(message)
        self.column = column


class ShapeError(SafnError, ValueError):
    pass


class NumericError(SafnError, ArithmeticError):
    pass


class UsageError(SafnError):
    pass


@dataclass
class Result(Generic[T, E]):
    ok: bool
    value: T | None
    error: E | None

    @classmethod
    def Ok(cls, value: T) -> Result[T, E]:
        return cls(ok=True, value=value, error=None)

    @classmethod
    def Error(cls, error: E) -> Result[T, E]:
        return cls(ok=False, value=None, error=error)

    def unwrap(self) -> T:
        """Return the value or raise the error."""
        if not self.ok:
            if isinstance(self.error, BaseException):
                raise self.error
            raise SafnError(self.error)
        return self.value  # type: ignore

    def unwrap_or(self, default: T) -> T:  # type: ignore[assignment]
        """Return the value if ok, otherwise *default*."""
        if self.ok:
            return self.value  # type: ignore
        return default

    def map(self, fn: Callable[[T], U]) -> Result[U, E]:
        """Apply *fn* to the value if ok, pass through errors."""
        if self.ok:
            return Result.Ok(fn(self.value))  # type: ignore
        return Result.Error(self.error)  # type: ignore

    def __bool__(self) -> bool:
        return self.ok
