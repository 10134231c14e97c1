"""sofield: trainable semantic occupancy fields with a numpy autodiff core."""

__version__ = "0.1.0"
