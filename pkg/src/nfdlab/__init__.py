"""nfdlab: a numerical laboratory for feature-learning dynamics of deep residual networks."""

__version__ = "0.1.0"
