"""lineal: a declarative linear-algebra runtime with lineage-based reuse."""

from .blocks import BasicTensorBlock, DataTensorBlock, construct, convert_layout
from .builtins import ModelFit, cvlm_fit, gen_data, grid_search_lm, lm_ds, steplm_fit
from .errors import (
    FederatedError,
    IOFormatError,
    LinealError,
    ScriptRuntimeError,
    ScriptSyntaxError,
    ShapeError,
    SingularMatrixError,
    ValueTypeError,
)
from .interpreter import ExecStats, Session
from .vtypes import Scalar, ValueType

__version__ = "0.1.0"

__all__ = [
    "BasicTensorBlock",
    "DataTensorBlock",
    "ExecStats",
    "FederatedError",
    "IOFormatError",
    "LinealError",
    "ModelFit",
    "Scalar",
    "Session",
    "ScriptRuntimeError",
    "ScriptSyntaxError",
    "ShapeError",
    "SingularMatrixError",
    "ValueType",
    "ValueTypeError",
    "construct",
    "convert_layout",
    "cvlm_fit",
    "gen_data",
    "grid_search_lm",
    "lm_ds",
    "steplm_fit",
    "__version__",
]
