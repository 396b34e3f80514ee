"""Synthetic near-infrared scenes with known ground truth.

Endmembers are smooth continua multiplied by Gaussian absorption features at
distinct band centers, mixed linearly per pixel over a region layout, with
white Gaussian noise scaled to a requested SNR. The generator is the oracle
for subspace-dimension, training, clustering, and end-to-end tests: the
label raster, endmember spectra, abundances, and injected noise level are
all returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import HsiCube, WavelengthGrid
from .errors import ConfigError
from .ingest import LabelRaster


@dataclass(frozen=True)
class AbsorptionFeature:
    center_nm: float
    width_nm: float  # Gaussian sigma
    depth: float  # in (0, 1)


@dataclass
class SynthSpec:
    rows: int = 64
    cols: int = 64
    bands: int = 50
    wl_min: float = 1000.0
    wl_max: float = 2600.0
    n_endmembers: int = 5
    features: list[list[AbsorptionFeature]] | None = None  # None -> drawn from seed
    continuum_levels: list[float] | None = None  # None -> drawn from seed
    continuum_slopes: list[float] | None = None
    layout: str = "blocks"  # "blocks" or "voronoi"
    mixing: str = "pure"  # "pure" or "dirichlet"
    dirichlet_strength: float = 30.0
    snr_db: float = 35.0  # math.inf -> noiseless
    column_gain_jitter: float = 0.0  # robustness-test knob, off by default
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_endmembers <= 10:
            raise ConfigError("n_endmembers must be between 1 and 10")
        if self.layout not in ("blocks", "voronoi"):
            raise ConfigError(f"unknown layout '{self.layout}'")
        if self.mixing not in ("pure", "dirichlet"):
            raise ConfigError(f"unknown mixing mode '{self.mixing}'")
        if self.features is not None:
            if len(self.features) != self.n_endmembers:
                raise ConfigError("features must list one feature set per endmember")
            for feats in self.features:
                for f in feats:
                    if not 0.0 < f.depth < 1.0:
                        raise ConfigError("absorption depth must lie in (0, 1)")
        for name, values in (("continuum_levels", self.continuum_levels),
                             ("continuum_slopes", self.continuum_slopes)):
            if values is not None and len(values) != self.n_endmembers:
                raise ConfigError(f"{name} must list one value per endmember")


@dataclass
class SynthScene:
    cube: HsiCube
    labels: LabelRaster  # class ids 1..r
    endmembers: np.ndarray  # (r, w)
    abundances: np.ndarray  # (rows, cols, r)
    noise_sigma: float
    spec: SynthSpec = field(repr=False, default=None)


def _draw_features(spec: SynthSpec, rng: np.random.Generator) -> list[list[AbsorptionFeature]]:
    """Deal distinct absorption centers to each endmember from a shared pool
    so the spectra stay well separated in angle.

    Feature widths stay at several band spacings; single-band spikes would
    make bands unpredictable from their neighbors and break the premise of
    regression-based noise estimation.
    """
    span = spec.wl_max - spec.wl_min
    min_width = 2.5 * span / max(spec.bands - 1, 1)
    pool = np.linspace(spec.wl_min + 0.06 * span, spec.wl_max - 0.06 * span, 24)
    rng.shuffle(pool)
    out = []
    cursor = 0
    for _ in range(spec.n_endmembers):
        nf = int(rng.integers(2, 4))
        feats = []
        for _ in range(nf):
            center = pool[cursor % pool.size]
            cursor += 1
            feats.append(AbsorptionFeature(
                center_nm=float(center),
                width_nm=float(rng.uniform(min_width, 3.0 * min_width)),
                depth=float(rng.uniform(0.25, 0.55)),
            ))
        out.append(feats)
    return out


def _endmember(wl: np.ndarray, feats: list[AbsorptionFeature],
               level: float, slope: float) -> np.ndarray:
    t = (wl - wl[0]) / (wl[-1] - wl[0])
    spectrum = level + slope * t
    for f in feats:
        spectrum = spectrum * (1.0 - f.depth * np.exp(-0.5 * ((wl - f.center_nm) / f.width_nm) ** 2))
    return spectrum


def _region_ids(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    r = spec.n_endmembers
    if spec.layout == "blocks":
        nb = math.ceil(math.sqrt(r))
        row_edges = np.linspace(0, spec.rows, nb + 1).astype(int)
        col_edges = np.linspace(0, spec.cols, nb + 1).astype(int)
        ids = np.zeros((spec.rows, spec.cols), dtype=np.int64)
        tile = 0
        for i in range(nb):
            for j in range(nb):
                ids[row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]] = tile % r
                tile += 1
        return ids
    # voronoi: nearest of r seed points
    seeds_r = rng.uniform(0, spec.rows, size=r)
    seeds_c = rng.uniform(0, spec.cols, size=r)
    rr, cc = np.meshgrid(np.arange(spec.rows), np.arange(spec.cols), indexing="ij")
    d2 = (rr[:, :, None] - seeds_r) ** 2 + (cc[:, :, None] - seeds_c) ** 2
    return d2.argmin(axis=2)


def generate(spec: SynthSpec) -> SynthScene:
    """Build a scene; bit-identical for a fixed spec (single seeded stream)."""
    rng = np.random.default_rng(spec.seed)
    wl = np.linspace(spec.wl_min, spec.wl_max, spec.bands)
    grid = WavelengthGrid(wl)

    feats = spec.features if spec.features is not None else _draw_features(spec, rng)
    levels = rng.uniform(0.35, 0.75, size=spec.n_endmembers)
    slopes = rng.uniform(-0.15, 0.15, size=spec.n_endmembers)
    if spec.continuum_levels is not None:
        levels = np.asarray(spec.continuum_levels, dtype=np.float64)
    if spec.continuum_slopes is not None:
        slopes = np.asarray(spec.continuum_slopes, dtype=np.float64)
    endmembers = np.stack([
        _endmember(wl, feats[i], levels[i], slopes[i]) for i in range(spec.n_endmembers)
    ])

    regions = _region_ids(spec, rng)
    r = spec.n_endmembers
    if spec.mixing == "pure":
        abundances = np.eye(r)[regions]
    else:
        alphas = np.ones((spec.rows, spec.cols, r))
        alphas[np.arange(spec.rows)[:, None], np.arange(spec.cols)[None, :], regions] = \
            spec.dirichlet_strength
        gam = rng.gamma(shape=alphas)
        abundances = gam / gam.sum(axis=2, keepdims=True)

    signal = abundances @ endmembers
    if spec.column_gain_jitter > 0.0:
        gains = 1.0 + spec.column_gain_jitter * rng.standard_normal(spec.cols)
        signal = signal * gains[None, :, None]

    if math.isinf(spec.snr_db):
        sigma = 0.0
        data = signal
    else:
        power = float((signal ** 2).mean())
        sigma = math.sqrt(power / 10.0 ** (spec.snr_db / 10.0))
        data = signal + sigma * rng.standard_normal(signal.shape)

    labels = LabelRaster(labels=(abundances.argmax(axis=2) + 1).astype(np.int32))
    return SynthScene(
        cube=HsiCube(data=data, grid=grid),
        labels=labels,
        endmembers=endmembers,
        abundances=abundances,
        noise_sigma=sigma,
        spec=spec,
    )
