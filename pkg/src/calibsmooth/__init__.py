"""Confidence calibration for small classifiers via on- and off-manifold smoothing."""

__version__ = "0.1.0"
