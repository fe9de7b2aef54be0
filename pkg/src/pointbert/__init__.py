"""Masked point modeling on a numpy autodiff core."""

__version__ = "0.1.0"
