"""Semisupervised convolutional-transformer peak detection on multichannel
extracted ion chromatograms."""

from .nn import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
