"""Hybrid CAE + transformer + shifted-window classifier for sub-solid lung nodules, on a numpy autodiff core."""

__version__ = "0.1.0"
