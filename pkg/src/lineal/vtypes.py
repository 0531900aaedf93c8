"""Value types and scalar values shared by every tensor block."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from .errors import ValueTypeError


class ValueType(Enum):
    FP32 = "FP32"
    FP64 = "FP64"
    INT32 = "INT32"
    INT64 = "INT64"
    BOOLEAN = "BOOLEAN"
    STRING = "STRING"

    @property
    def is_numeric(self) -> bool:
        return self is not ValueType.STRING

    def __repr__(self) -> str:
        return self.value


_NUMPY_DTYPES = {
    ValueType.FP32: np.dtype(np.float32),
    ValueType.FP64: np.dtype(np.float64),
    ValueType.INT32: np.dtype(np.int32),
    ValueType.INT64: np.dtype(np.int64),
    ValueType.BOOLEAN: np.dtype(np.bool_),
    ValueType.STRING: np.dtype(object),
}

# In-memory cell widths used for cache-size accounting.  STRING uses a flat
# estimate; exact footprints of Python strings are not worth chasing.
_CELL_BYTES = {
    ValueType.FP32: 4,
    ValueType.FP64: 8,
    ValueType.INT32: 4,
    ValueType.INT64: 8,
    ValueType.BOOLEAN: 1,
    ValueType.STRING: 48,
}


def numpy_dtype(vt: ValueType) -> np.dtype:
    return _NUMPY_DTYPES[vt]


def cell_bytes(vt: ValueType) -> int:
    return _CELL_BYTES[vt]


def vtype_of_dtype(dt: np.dtype) -> ValueType:
    dt = np.dtype(dt)
    for vt, cand in _NUMPY_DTYPES.items():
        if cand == dt:
            return vt
    if np.issubdtype(dt, np.floating):
        return ValueType.FP64
    if np.issubdtype(dt, np.integer):
        return ValueType.INT64
    if np.issubdtype(dt, np.bool_):
        return ValueType.BOOLEAN
    raise ValueTypeError(f"no value type for dtype {dt}")


def check_numeric(vt: ValueType, op: str) -> None:
    if not vt.is_numeric:
        raise ValueTypeError(f"{op} does not accept STRING operands")


def representable(value: Any, vt: ValueType) -> Any:
    """Coerce ``value`` into ``vt``, raising if the cast loses information."""
    if vt is ValueType.STRING:
        if not isinstance(value, str):
            raise ValueTypeError(f"{value!r} is not a STRING value")
        return value
    if vt is ValueType.BOOLEAN:
        if isinstance(value, (bool, np.bool_)):
            return bool(value)
        if value in (0, 1):
            return bool(value)
        raise ValueTypeError(f"{value!r} is not representable as BOOLEAN")
    if vt in (ValueType.INT32, ValueType.INT64):
        iv = int(value)
        if iv != value:
            raise ValueTypeError(f"{value!r} is not representable as {vt.value}")
        info = np.iinfo(numpy_dtype(vt))
        if not (info.min <= iv <= info.max):
            raise ValueTypeError(f"{value!r} out of range for {vt.value}")
        return iv
    fv = float(value)
    if vt is ValueType.FP32:
        return float(np.float32(fv))
    return fv


@dataclass(frozen=True)
class Scalar:
    """A single typed value."""

    vtype: ValueType
    value: Any

    def __post_init__(self):
        object.__setattr__(self, "value", representable(self.value, self.vtype))

    @staticmethod
    def of(value: Any) -> "Scalar":
        """Wrap a Python value, inferring the value type."""
        if isinstance(value, Scalar):
            return value
        if isinstance(value, (bool, np.bool_)):
            return Scalar(ValueType.BOOLEAN, bool(value))
        if isinstance(value, (int, np.integer)):
            return Scalar(ValueType.INT64, int(value))
        if isinstance(value, (float, np.floating)):
            return Scalar(ValueType.FP64, float(value))
        if isinstance(value, str):
            return Scalar(ValueType.STRING, value)
        raise ValueTypeError(f"cannot infer value type of {value!r}")

    def as_float(self) -> float:
        check_numeric(self.vtype, "numeric cast")
        return float(self.value)

    def as_int(self) -> int:
        check_numeric(self.vtype, "integer cast")
        iv = int(self.value)
        if iv != self.value:
            raise ValueTypeError(f"{self.value!r} is not an integer")
        return iv

    def as_bool(self) -> bool:
        if self.vtype is ValueType.STRING:
            raise ValueTypeError("STRING scalar in boolean context")
        return bool(self.value)

    def __repr__(self) -> str:
        return f"Scalar({self.vtype.value}, {self.value!r})"
