"""Learned recurrent gradient-descent optimizer for image deconvolution."""

__version__ = "0.1.0"
