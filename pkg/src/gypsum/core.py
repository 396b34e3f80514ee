"""Core hyperspectral containers and spectral math used by every stage.

All floating-point data is held at 64-bit precision; containers are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A spectrum is a plain 1-D float64 array with one reflectance per band.
Spectrum = np.ndarray


@dataclass(frozen=True)
class WavelengthGrid:
    """Band-center wavelengths in nanometers, strictly increasing."""

    centers: np.ndarray

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        object.__setattr__(self, "centers", centers)
        if centers.ndim != 1 or centers.size == 0:
            raise ValueError("wavelength grid must be a non-empty 1-D array")
        if not np.all(np.isfinite(centers)) or np.any(centers <= 0.0):
            raise ValueError("wavelength centers must be finite and positive")
        if np.any(np.diff(centers) <= 0.0):
            raise ValueError("wavelength centers must be strictly increasing")

    def __len__(self) -> int:
        return int(self.centers.size)


@dataclass(frozen=True)
class HsiCube:
    """Reflectance raster, indexed (row, col, band), on a wavelength grid."""

    data: np.ndarray
    grid: WavelengthGrid

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 3:
            raise ValueError(f"cube data must be 3-D (rows, cols, bands), got shape {data.shape}")
        if data.shape[2] != len(self.grid):
            raise ValueError(
                f"cube has {data.shape[2]} bands but grid has {len(self.grid)} centers"
            )

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PixelMask:
    """Boolean keep/discard flag per raster pixel (True = keep)."""

    keep: np.ndarray

    def __post_init__(self):
        keep = np.asarray(self.keep, dtype=bool)
        object.__setattr__(self, "keep", keep)
        if keep.ndim != 2:
            raise ValueError("mask must be 2-D (rows, cols)")

    @property
    def rows(self) -> int:
        return self.keep.shape[0]

    @property
    def cols(self) -> int:
        return self.keep.shape[1]

    @property
    def n_kept(self) -> int:
        return int(self.keep.sum())


@dataclass(frozen=True)
class PixelMatrix:
    """Flattened p x w matrix of kept-pixel spectra with raster provenance.

    ``origin[i]`` is the (row, col) the i-th spectrum came from, so labelings
    computed on rows of ``spectra`` can be scattered back onto the raster.
    """

    spectra: np.ndarray
    origin: np.ndarray
    grid: WavelengthGrid

    def __post_init__(self):
        spectra = np.asarray(self.spectra, dtype=np.float64)
        origin = np.asarray(self.origin, dtype=np.int64)
        object.__setattr__(self, "spectra", spectra)
        object.__setattr__(self, "origin", origin)
        if spectra.ndim != 2:
            raise ValueError("pixel matrix must be 2-D (pixels, bands)")
        if origin.shape != (spectra.shape[0], 2):
            raise ValueError("origin must hold one (row, col) pair per spectrum")
        if spectra.shape[1] != len(self.grid):
            raise ValueError("pixel matrix band count does not match grid")

    @property
    def p(self) -> int:
        return self.spectra.shape[0]

    @property
    def w(self) -> int:
        return self.spectra.shape[1]


def spectral_angle(a: Spectrum, b: Spectrum) -> float:
    """Angle in radians between two spectra: arccos of their normalized inner product.

    Symmetric and invariant to positive scaling of either argument. The cosine
    is clamped into [-1, 1] before arccos to absorb rounding.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"spectra must be 1-D and equal length, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("spectral angle is undefined for a zero spectrum")
    cos = float(np.dot(a, b)) / (na * nb)
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def pairwise_spectral_angles(spectra: np.ndarray) -> np.ndarray:
    """k x k matrix of spectral angles between rows of ``spectra``.

    Diagonal is zero. Rows must all be nonzero.
    """
    spectra = np.asarray(spectra, dtype=np.float64)
    norms = np.linalg.norm(spectra, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("spectral angle is undefined for a zero spectrum")
    unit = spectra / norms[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    ang = np.arccos(cos)
    np.fill_diagonal(ang, 0.0)
    return ang


def l2_normalize(s: Spectrum) -> Spectrum:
    """Scale a spectrum to unit L2 norm, preserving its direction."""
    s = np.asarray(s, dtype=np.float64)
    n = float(np.linalg.norm(s))
    if n == 0.0:
        raise ValueError("cannot normalize a zero spectrum")
    return s / n


def flatten(cube: HsiCube, mask: PixelMask | None = None) -> PixelMatrix:
    """Flatten kept pixels of a cube into a PixelMatrix, row-major order."""
    if mask is not None:
        if mask.rows != cube.rows or mask.cols != cube.cols:
            raise ValueError(
                f"mask shape {(mask.rows, mask.cols)} does not match cube {(cube.rows, cube.cols)}"
            )
        keep = mask.keep
    else:
        keep = np.ones((cube.rows, cube.cols), dtype=bool)
    rr, cc = np.nonzero(keep)
    if rr.size == 0:
        raise ValueError("every pixel is masked; nothing to flatten")
    spectra = cube.data[rr, cc, :]
    origin = np.stack([rr, cc], axis=1)
    return PixelMatrix(spectra=spectra, origin=origin, grid=cube.grid)


def unflatten(matrix: PixelMatrix, rows: int, cols: int, fill: float = np.nan) -> np.ndarray:
    """Scatter a PixelMatrix back onto a (rows, cols, w) raster; masked pixels get ``fill``."""
    out = np.full((rows, cols, matrix.w), fill, dtype=np.float64)
    out[matrix.origin[:, 0], matrix.origin[:, 1], :] = matrix.spectra
    return out


def scatter_labels(values: np.ndarray, origin: np.ndarray, rows: int, cols: int,
                   fill: int = -1) -> np.ndarray:
    """Scatter per-pixel integer values onto a raster; unkept pixels get ``fill``."""
    values = np.asarray(values)
    out = np.full((rows, cols), fill, dtype=np.int32)
    out[origin[:, 0], origin[:, 1]] = values
    return out
