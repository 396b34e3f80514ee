"""Raster I/O: ENVI cubes, masks, label rasters, cluster maps, CSV/PNG outputs.

ENVI files are a flat binary payload plus a text ``.hdr``. Header keys are
treated case-insensitively and unknown keys are ignored; brace-wrapped list
values may span lines. Supported data type codes:

    1  = 8-bit unsigned integer
    2  = 16-bit signed integer
    4  = 32-bit float
    5  = 64-bit float
    12 = 16-bit unsigned integer

Masks are 8-bit rasters with nonzero = keep. Label rasters are 16-bit
unsigned, BSQ; cluster maps store masked pixels as 65535.
"""

from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .cluster import ClusterMap
from .core import HsiCube, PixelMask, WavelengthGrid
from .errors import EnviFormatError

DTYPE_CODES = {
    1: np.dtype(np.uint8),
    2: np.dtype(np.int16),
    4: np.dtype(np.float32),
    5: np.dtype(np.float64),
    12: np.dtype(np.uint16),
}

# Stored value for the masked / no-data sentinel in cluster-map rasters.
NO_DATA_LABEL = 65535

INTERLEAVES = ("bsq", "bil", "bip")


@dataclass
class EnviHeader:
    samples: int
    lines: int
    bands: int
    interleave: str
    data_type: int
    byte_order: int = 0
    header_offset: int = 0
    wavelength: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


@dataclass
class LabelRaster:
    """Integer class ids per pixel; 0 means unlabeled."""

    labels: np.ndarray
    class_names: dict[int, str] | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int32)
        if labels.ndim != 2:
            raise ValueError("label raster must be 2-D")
        if np.any(labels < 0):
            raise ValueError("label ids must be non-negative (0 = unlabeled)")
        self.labels = labels

    @property
    def rows(self) -> int:
        return self.labels.shape[0]

    @property
    def cols(self) -> int:
        return self.labels.shape[1]


def _tokenize_header(text: str) -> dict[str, str]:
    """Split header text into lowercase key -> raw value, joining brace blocks."""
    entries: dict[str, str] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or line.startswith(";") or line.upper() == "ENVI":
            continue
        if "=" not in line:
            continue
        key, _, value = line.partition("=")
        key = " ".join(key.strip().lower().split())
        value = value.strip()
        if value.startswith("{"):
            while "}" not in value and i < len(lines):
                value += " " + lines[i].strip()
                i += 1
        entries[key] = value
    return entries


def _parse_int(entries: dict[str, str], key: str, default: int | None = None) -> int:
    if key not in entries:
        if default is not None:
            return default
        raise EnviFormatError(f"ENVI header is missing required field '{key}'")
    try:
        return int(entries[key])
    except ValueError as exc:
        raise EnviFormatError(f"ENVI header field '{key}' is not an integer: {entries[key]!r}") from exc


def parse_envi_header(path: str | Path) -> EnviHeader:
    path = Path(path)
    entries = _tokenize_header(path.read_text())
    samples = _parse_int(entries, "samples")
    lines = _parse_int(entries, "lines")
    bands = _parse_int(entries, "bands")
    data_type = _parse_int(entries, "data type")
    byte_order = _parse_int(entries, "byte order", default=0)
    header_offset = _parse_int(entries, "header offset", default=0)
    if "interleave" not in entries:
        raise EnviFormatError("ENVI header is missing required field 'interleave'")
    interleave = entries["interleave"].lower()
    if interleave not in INTERLEAVES:
        raise EnviFormatError(f"unsupported interleave '{interleave}' (expected bsq, bil, or bip)")
    if data_type not in DTYPE_CODES:
        raise EnviFormatError(f"unsupported data type code {data_type} in field 'data type'")

    wavelength = None
    if "wavelength" in entries:
        raw = entries["wavelength"].strip().strip("{}").strip()
        if raw:
            try:
                wavelength = np.array([float(v) for v in raw.split(",")], dtype=np.float64)
            except ValueError as exc:
                raise EnviFormatError("ENVI header field 'wavelength' contains non-numeric values") from exc
            if wavelength.size != bands:
                raise EnviFormatError(
                    f"ENVI header field 'wavelength' has {wavelength.size} values for {bands} bands"
                )

    known = {"samples", "lines", "bands", "data type", "byte order", "header offset",
             "interleave", "wavelength"}
    extras = {k: v for k, v in entries.items() if k not in known}
    return EnviHeader(samples=samples, lines=lines, bands=bands, interleave=interleave,
                      data_type=data_type, byte_order=byte_order,
                      header_offset=header_offset, wavelength=wavelength, extras=extras)


def _guess_data_path(header_path: Path) -> Path:
    candidates = [header_path.with_suffix("")]
    candidates += [header_path.with_suffix(ext) for ext in (".img", ".dat", ".raw", ".bsq", ".bil", ".bip")]
    for cand in candidates:
        if cand != header_path and cand.exists():
            return cand
    raise EnviFormatError(f"cannot find binary payload next to header {header_path}")


def read_envi_raster(header_path: str | Path, data_path: str | Path | None = None
                     ) -> tuple[np.ndarray, EnviHeader]:
    """Read any ENVI raster as a (rows, cols, bands) array in its native dtype."""
    header_path = Path(header_path)
    header = parse_envi_header(header_path)
    data_path = Path(data_path) if data_path is not None else _guess_data_path(header_path)

    dtype = DTYPE_CODES[header.data_type].newbyteorder("<" if header.byte_order == 0 else ">")
    n_values = header.samples * header.lines * header.bands
    needed = header.header_offset + n_values * dtype.itemsize
    actual = data_path.stat().st_size
    if actual < needed:
        raise EnviFormatError(
            f"{data_path} holds {actual} bytes but header fields samples*lines*bands "
            f"require {needed} (samples={header.samples}, lines={header.lines}, bands={header.bands})"
        )
    raw = np.fromfile(data_path, dtype=dtype, count=n_values, offset=header.header_offset)
    raw = raw.astype(raw.dtype.newbyteorder("="))

    if header.interleave == "bsq":
        arr = raw.reshape(header.bands, header.lines, header.samples).transpose(1, 2, 0)
    elif header.interleave == "bil":
        arr = raw.reshape(header.lines, header.bands, header.samples).transpose(0, 2, 1)
    else:  # bip
        arr = raw.reshape(header.lines, header.samples, header.bands)
    return np.ascontiguousarray(arr), header


def read_envi(header_path: str | Path, data_path: str | Path | None = None,
              wavelengths: np.ndarray | None = None) -> HsiCube:
    """Read an ENVI cube, widening values to float64.

    The wavelength grid comes from the header unless ``wavelengths`` is
    supplied explicitly (a sidecar for headers that omit the field).
    """
    arr, header = read_envi_raster(header_path, data_path)
    if wavelengths is None:
        wavelengths = header.wavelength
    if wavelengths is None:
        raise EnviFormatError(
            f"{header_path} has no 'wavelength' field; supply band centers separately"
        )
    grid = WavelengthGrid(np.asarray(wavelengths, dtype=np.float64))
    return HsiCube(data=arr.astype(np.float64), grid=grid)


def write_envi(header_path: str | Path, data_path: str | Path, data: np.ndarray,
               grid: WavelengthGrid | None = None, interleave: str = "bsq",
               description: str = "gypsum raster") -> None:
    """Write a (rows, cols, bands) array as an ENVI raster, little-endian."""
    header_path = Path(header_path)
    data_path = Path(data_path)
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise ValueError("ENVI payload must be 2-D or 3-D")
    interleave = interleave.lower()
    if interleave not in INTERLEAVES:
        raise ValueError(f"unsupported interleave '{interleave}'")
    code = None
    for k, dt in DTYPE_CODES.items():
        if dt == data.dtype:
            code = k
            break
    if code is None:
        raise ValueError(f"unsupported dtype {data.dtype} for ENVI output")

    rows, cols, bands = data.shape
    if interleave == "bsq":
        payload = data.transpose(2, 0, 1)
    elif interleave == "bil":
        payload = data.transpose(0, 2, 1)
    else:
        payload = data
    little = data.dtype.newbyteorder("<")
    np.ascontiguousarray(payload).astype(little).tofile(data_path)

    lines = [
        "ENVI",
        f"description = {{{description}}}",
        f"samples = {cols}",
        f"lines = {rows}",
        f"bands = {bands}",
        "header offset = 0",
        "file type = ENVI Standard",
        f"data type = {code}",
        f"interleave = {interleave}",
        "byte order = 0",
    ]
    if grid is not None:
        if len(grid) != bands:
            raise ValueError("grid length does not match band count")
        wl = ", ".join(format(v, "g") for v in grid.centers)
        lines.append("wavelength units = Nanometers")
        lines.append(f"wavelength = {{{wl}}}")
    header_path.write_text("\n".join(lines) + "\n")


def read_mask(header_path: str | Path, data_path: str | Path | None = None) -> PixelMask:
    arr, header = read_envi_raster(header_path, data_path)
    if header.bands != 1:
        raise EnviFormatError(f"mask raster must have a single band, got {header.bands}")
    return PixelMask(keep=arr[:, :, 0] != 0)


def write_mask(header_path: str | Path, data_path: str | Path, mask: PixelMask) -> None:
    write_envi(header_path, data_path, mask.keep.astype(np.uint8), description="gypsum mask")


def read_label_raster(header_path: str | Path, data_path: str | Path | None = None) -> LabelRaster:
    arr, header = read_envi_raster(header_path, data_path)
    if header.bands != 1:
        raise EnviFormatError(f"label raster must have a single band, got {header.bands}")
    return LabelRaster(labels=arr[:, :, 0].astype(np.int32))


def write_label_raster(header_path: str | Path, data_path: str | Path, raster: LabelRaster) -> None:
    if np.any(raster.labels > NO_DATA_LABEL):
        raise ValueError("label ids exceed the 16-bit unsigned range")
    write_envi(header_path, data_path, raster.labels.astype(np.uint16),
               description="gypsum labels")


# Fixed fallback colors for clusters that get no reference match; further
# colors come from a golden-ratio hue walk so the cycle never repeats early.
FALLBACK_COLORS = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (67, 99, 216),
    (245, 130, 49), (145, 30, 180), (66, 212, 244), (240, 50, 230),
    (191, 239, 69), (250, 190, 212), (70, 153, 144), (220, 190, 255),
    (154, 99, 36), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 216, 177), (0, 0, 117), (169, 169, 169),
]


def _color_cycle():
    yield from FALLBACK_COLORS
    hue = 0.13
    while True:
        hue = (hue + 0.61803398875) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
        yield (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def default_palette(k: int) -> list[tuple[int, int, int]]:
    """Deterministic list of k visually distinct RGB colors."""
    cycle = _color_cycle()
    return [next(cycle) for _ in range(k)]


def match_palette(current: ClusterMap, reference: ClusterMap) -> list[tuple[int, int, int]]:
    """Recolor ``current`` to visually track ``reference``.

    Greedy over current clusters in descending size order: each takes the
    color of the not-yet-consumed reference cluster it overlaps most (by
    pixel count); clusters with no positive overlap left draw from the
    fallback cycle. No reference color is handed out twice.
    """
    if current.labels.shape != reference.labels.shape:
        raise ValueError(
            f"raster shapes differ: {current.labels.shape} vs {reference.labels.shape}"
        )
    if reference.palette is None:
        raise ValueError("reference map has no palette to match against")

    order = sorted(range(current.k), key=lambda c: (-int(current.cluster_sizes[c]), c))
    consumed: set[int] = set()
    palette: list[tuple[int, int, int] | None] = [None] * current.k
    for c in order:
        in_c = current.labels == c
        best_ref, best_overlap = -1, 0
        for r in range(reference.k):
            if r in consumed:
                continue
            overlap = int(np.count_nonzero(in_c & (reference.labels == r)))
            if overlap > best_overlap:
                best_ref, best_overlap = r, overlap
        if best_ref >= 0:
            consumed.add(best_ref)
            palette[c] = tuple(reference.palette[best_ref])

    used = {tuple(col) for col in palette if col is not None}
    cycle = _color_cycle()
    for c in order:
        if palette[c] is None:
            color = next(cycle)
            while color in used:
                color = next(cycle)
            used.add(color)
            palette[c] = color
    return [tuple(col) for col in palette]


def write_cluster_map(cmap: ClusterMap, png_path: str | Path,
                      header_path: str | Path, data_path: str | Path) -> None:
    """Write a cluster map as a paletted PNG plus an ENVI label raster.

    The PNG renders no-data pixels black; the ENVI payload stores cluster ids
    as 16-bit unsigned with NO_DATA_LABEL for masked pixels.
    """
    if cmap.palette is None or len(cmap.palette) < cmap.k:
        raise ValueError("cluster map palette does not cover all labels")
    rows, cols = cmap.labels.shape
    rgb = np.zeros((rows, cols, 3), dtype=np.uint8)
    for c in range(cmap.k):
        rgb[cmap.labels == c] = cmap.palette[c]
    Image.fromarray(rgb, mode="RGB").save(Path(png_path))

    stored = cmap.labels.astype(np.int64).copy()
    stored[stored < 0] = NO_DATA_LABEL
    if np.any((stored >= NO_DATA_LABEL) & (cmap.labels >= 0)):
        raise ValueError("cluster ids exceed the 16-bit unsigned range")
    write_envi(header_path, data_path, stored.astype(np.uint16), description="gypsum cluster map")


def read_cluster_labels(header_path: str | Path, data_path: str | Path | None = None) -> np.ndarray:
    """Read back a cluster-map raster, restoring the -1 no-data sentinel."""
    arr, header = read_envi_raster(header_path, data_path)
    if header.bands != 1:
        raise EnviFormatError(f"cluster map raster must have a single band, got {header.bands}")
    labels = arr[:, :, 0].astype(np.int32)
    labels[labels == NO_DATA_LABEL] = -1
    return labels


def write_cluster_means_csv(cmap: ClusterMap, grid: WavelengthGrid, path: str | Path) -> None:
    """One row per cluster: id, size, then mean reflectance per wavelength."""
    if cmap.cluster_means.shape[1] != len(grid):
        raise ValueError("cluster means band count does not match grid")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster", "size"] + [format(v, "g") for v in grid.centers])
        for c in range(cmap.k):
            writer.writerow([c, int(cmap.cluster_sizes[c])]
                            + [repr(float(v)) for v in cmap.cluster_means[c]])
