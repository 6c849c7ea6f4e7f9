"""Fractal (Mandelbrot) percolation: simulation, intrinsic volumes and their limits."""

from .percolation import CapacityError, CellGrid, ModelParams, Realization, generate
from .minkowski import MinkowskiVector, intrinsic_all
from .theory import SubcriticalError, limit_functional_series

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "CellGrid", "ModelParams", "Realization", "generate",
    "MinkowskiVector", "intrinsic_all", "SubcriticalError", "limit_functional_series",
]
