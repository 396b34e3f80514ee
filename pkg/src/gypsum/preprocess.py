"""Preprocessing for laboratory and orbital workflows.

Stage order is fixed: reflectance clip -> ratio (orbital) -> wavelength trim
-> per-pixel L2 normalization -> mask -> continuum removal (lab) -> flatten.
Pixels that are non-finite or zero-norm are added to the mask instead of
being passed downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import HsiCube, PixelMask, PixelMatrix, WavelengthGrid, flatten
from .errors import ConfigError, NumericalError

RATIO_EPS = 1e-6

# ROI rectangles are (row_start, row_stop, col_start, col_stop), half-open.
Roi = tuple[int, int, int, int]


@dataclass
class PreprocessConfig:
    workflow: str = "lab"  # "lab" or "orbital"
    clip_lo: float = 0.0
    clip_hi: float = 1.0
    wl_min: float = 1050.0
    wl_max: float = 2550.0
    ratio_rois: list[Roi] | None = None
    continuum_removal: bool = False  # opt-in, meant for the lab workflow
    mask_path: str | None = None

    def __post_init__(self):
        if self.workflow not in ("lab", "orbital"):
            raise ConfigError(f"unknown workflow '{self.workflow}' (expected 'lab' or 'orbital')")
        if not self.clip_lo < self.clip_hi:
            raise ConfigError("clip_lo must be below clip_hi")
        if not self.wl_min < self.wl_max:
            raise ConfigError("wl_min must be below wl_max")
        if self.ratio_rois is not None and self.workflow != "orbital":
            raise ConfigError("ratio ROIs are only valid in the orbital workflow")


def clip_reflectance(cube: HsiCube, lo: float = 0.0, hi: float = 1.0
                     ) -> tuple[HsiCube, np.ndarray]:
    """Clamp reflectances into [lo, hi].

    Non-finite values are replaced by 0 and the affected pixels are returned
    as a (rows, cols) boolean flag raster so callers can mask them.
    """
    data = cube.data.copy()
    bad = ~np.isfinite(data)
    flagged = bad.any(axis=2)
    data[bad] = 0.0
    np.clip(data, lo, hi, out=data)
    return HsiCube(data=data, grid=cube.grid), flagged


def ratio_image(cube: HsiCube, rois: list[Roi]) -> HsiCube:
    """Divide every pixel by the mean spectrum of the ROI pixels.

    The ratio spectrum must be strictly positive; a band at or below
    RATIO_EPS aborts with the offending band named.
    """
    if not rois:
        raise ConfigError("ratio step requires at least one ROI rectangle")
    sel = np.zeros((cube.rows, cube.cols), dtype=bool)
    for r0, r1, c0, c1 in rois:
        if not (0 <= r0 < r1 <= cube.rows and 0 <= c0 < c1 <= cube.cols):
            raise ConfigError(f"ROI {(r0, r1, c0, c1)} is outside the {cube.rows}x{cube.cols} raster")
        sel[r0:r1, c0:c1] = True
    ratio = cube.data[sel].mean(axis=0)
    low = np.nonzero(ratio <= RATIO_EPS)[0]
    if low.size:
        band = int(low[0])
        raise NumericalError(
            f"ratio spectrum is not positive at band {band} "
            f"({cube.grid.centers[band]:.1f} nm): {ratio[band]:.3e}"
        )
    return HsiCube(data=cube.data / ratio, grid=cube.grid)


def clip_wavelengths(cube: HsiCube, wl_min: float, wl_max: float) -> HsiCube:
    """Retain exactly the bands whose centers fall in [wl_min, wl_max], inclusive."""
    keep = (cube.grid.centers >= wl_min) & (cube.grid.centers <= wl_max)
    if not keep.any():
        raise ConfigError(f"no bands fall inside [{wl_min}, {wl_max}] nm")
    return HsiCube(data=cube.data[:, :, keep], grid=WavelengthGrid(cube.grid.centers[keep]))


def normalize_pixels(cube: HsiCube) -> tuple[HsiCube, np.ndarray]:
    """Scale each pixel spectrum to unit L2 norm.

    Zero-norm pixels are left untouched and returned as a flag raster; they
    must be masked rather than normalized.
    """
    norms = np.linalg.norm(cube.data, axis=2)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    return HsiCube(data=cube.data / safe[:, :, None], grid=cube.grid), zero


def _upper_hull_indices(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Indices of the upper convex hull of (x, y), x strictly increasing."""
    hull = [0]
    for j in range(1, x.size):
        # pop while the last hull point is on or below the chord (non-clockwise turn)
        while len(hull) >= 2:
            i0, i1 = hull[-2], hull[-1]
            cross = (x[i1] - x[i0]) * (y[j] - y[i0]) - (y[i1] - y[i0]) * (x[j] - x[i0])
            if cross >= 0.0:
                hull.pop()
            else:
                break
        hull.append(j)
    return np.asarray(hull, dtype=np.int64)


def remove_continuum(matrix: PixelMatrix) -> PixelMatrix:
    """Divide each spectrum by the piecewise-linear upper convex hull over
    (wavelength, value) points.

    Outputs lie in [0, 1] up to rounding with both endpoints exactly 1.
    """
    if not np.all(np.isfinite(matrix.spectra)):
        raise NumericalError("continuum removal requires finite spectra")
    if np.any(matrix.spectra < 0.0):
        raise NumericalError("continuum removal requires nonnegative spectra")
    ends = matrix.spectra[:, [0, -1]]
    if np.any(ends <= 0.0):
        raise NumericalError("continuum removal requires positive endpoint values")

    wl = matrix.grid.centers
    out = np.empty_like(matrix.spectra)
    for i in range(matrix.p):
        s = matrix.spectra[i]
        hull = _upper_hull_indices(wl, s)
        continuum = np.interp(wl, wl[hull], s[hull])
        out[i] = s / continuum
    return PixelMatrix(spectra=out, origin=matrix.origin, grid=matrix.grid)


def preprocess(cube: HsiCube, config: PreprocessConfig,
               mask: PixelMask | None = None) -> PixelMatrix:
    """Run the full preprocessing chain and flatten to a pixel matrix.

    ``mask`` overrides ``config.mask_path``; flagged (non-finite or
    zero-norm) pixels are always dropped in addition to the mask.
    """
    if mask is None and config.mask_path is not None:
        from .ingest import read_mask

        mask = read_mask(config.mask_path)

    cube, flagged = clip_reflectance(cube, config.clip_lo, config.clip_hi)
    if config.workflow == "orbital" and config.ratio_rois:
        cube = ratio_image(cube, config.ratio_rois)
    cube = clip_wavelengths(cube, config.wl_min, config.wl_max)
    cube, zero_norm = normalize_pixels(cube)

    keep = np.ones((cube.rows, cube.cols), dtype=bool) if mask is None else mask.keep.copy()
    if keep.shape != (cube.rows, cube.cols):
        raise ConfigError(
            f"mask shape {keep.shape} does not match raster {(cube.rows, cube.cols)}"
        )
    keep &= ~flagged
    keep &= ~zero_norm
    if not keep.any():
        raise NumericalError("all pixels are masked or degenerate after preprocessing")

    matrix = flatten(cube, PixelMask(keep=keep))
    if config.continuum_removal:
        matrix = remove_continuum(matrix)
    return matrix
