"""Layered instance segmentation with attribute recognition, on a numpy autodiff core."""

__version__ = "0.1.0"
