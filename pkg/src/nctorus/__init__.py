"""Numerical toolkit for heat-kernel invariants of curved noncommutative tori."""

__version__ = "0.1.0"

from .core import (
    DimensionMismatchError,
    FourierElement,
    ThetaMatrix,
    TorusAlgebra,
    TruncationBox,
    delta,
)

__all__ = [
    "DimensionMismatchError",
    "FourierElement",
    "ThetaMatrix",
    "TorusAlgebra",
    "TruncationBox",
    "delta",
    "__version__",
]
