"""Grid experiments for Riesz capacities, maximal functions, Lipschitz truncation and the area formula."""

__version__ = "0.1.0"

from .grid import Grid, RegionMask, ScalarField, VectorField  # noqa: E402

__all__ = ["Grid", "RegionMask", "ScalarField", "VectorField", "__version__"]
