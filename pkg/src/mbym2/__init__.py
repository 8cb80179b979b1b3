"""Coregionalized multivariate BYM2 areal regression toolkit."""

__version__ = "0.1.0"
