"""rsl: train autoregressive emulators of spherical gridded dynamics and
score the stability of decade-scale rollouts against reference statistics."""

from .grid import AreaWeights, GridSpec, area_weighted_mean, area_weights, make_grid

__version__ = "0.1.0"

__all__ = ["AreaWeights", "GridSpec", "area_weighted_mean", "area_weights",
           "make_grid", "__version__"]
