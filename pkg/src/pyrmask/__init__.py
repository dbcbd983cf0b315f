"""Multi-scale query-based semantic segmentation on a float64 autodiff core."""

__version__ = "0.1.0"
