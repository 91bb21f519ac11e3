"""Stabilized doubly robust rating prediction under missing-not-at-random
feedback: estimator kernels, cycle learning, and a theory verification lab."""

__version__ = "0.1.0"
