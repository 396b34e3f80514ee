"""Unsupervised clustering of near-infrared hyperspectral images.

Library layout: ``core`` (containers, spectral math), ``ingest`` (ENVI and
report I/O), ``preprocess``, ``subspace`` (signal-dimension estimation),
``autoencoder``, ``cluster`` (GMM, k-means, PCA, merging), ``metrics``,
``synth`` (ground-truth scenes), ``pipeline`` and ``cli``.
"""

from .core import (
    HsiCube,
    PixelMask,
    PixelMatrix,
    WavelengthGrid,
    flatten,
    l2_normalize,
    spectral_angle,
    unflatten,
)

__all__ = [
    "HsiCube",
    "PixelMask",
    "PixelMatrix",
    "WavelengthGrid",
    "flatten",
    "l2_normalize",
    "spectral_angle",
    "unflatten",
]

__version__ = "0.1.0"
