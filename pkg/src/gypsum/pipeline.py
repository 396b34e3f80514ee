"""End-to-end orchestration: config file in, cluster maps and reports out.

A run executes preprocess -> subspace estimate (unless d is pinned) ->
autoencoder training -> embedding -> Gaussian-mixture clustering with
k = 2d (unless k is pinned) -> optional spectral-angle merging, then writes
the cluster map (PNG + ENVI), cluster means CSV, a metrics report, and a
manifest that makes the run reproducible. Stage wall-clock goes to a
separate timings file so the manifest stays byte-deterministic.
"""

from __future__ import annotations

import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ingest
from .autoencoder import AeConfig, Embedding, encode_all, train
from .cluster import ClusterMap, build_cluster_map, gmm_assign, gmm_fit, kmeans_fit, \
    merge_clusters, pca
from .core import HsiCube, PixelMask, PixelMatrix
from .errors import ConfigError, StageFailure
from .metrics import MetricsReport, evaluate
from .preprocess import PreprocessConfig, preprocess
from .subspace import cluster_count, estimate_dimension, estimate_noise

SCHEMA_VERSION = 1
LOCK_NAME = ".gypsum.lock"

_AE_OVERRIDE_KEYS = {
    "hidden_dims", "learning_rate", "batch_size", "max_epochs", "patience",
    "min_rel_improvement",
}


@dataclass
class PostprocessConfig:
    enabled: bool = False
    angle_threshold: float | None = None

    def __post_init__(self):
        if self.enabled:
            if self.angle_threshold is None:
                raise ConfigError("postprocess.angle_threshold is required when merging is on")
            if self.angle_threshold < 0.0:
                raise ConfigError("postprocess.angle_threshold must be nonnegative")


@dataclass
class BaselineConfig:
    enabled: bool = False
    n_components: int = 20
    k: int | None = None


@dataclass
class RunConfig:
    cube_header: str
    out_dir: str
    cube_data: str | None = None
    wavelengths_path: str | None = None
    mask_header: str | None = None
    mask_data: str | None = None
    labels_header: str | None = None
    labels_data: str | None = None
    reference_map_header: str | None = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    autoencoder: dict = field(default_factory=dict)
    d: int | None = None
    k: int | None = None
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    seed: int = 0

    def __post_init__(self):
        if self.d is not None and self.d < 1:
            raise ConfigError("embedding-size override must be at least 1")
        if self.k is not None and self.k < 1:
            raise ConfigError("cluster-count override must be at least 1")
        unknown = set(self.autoencoder) - _AE_OVERRIDE_KEYS
        if unknown:
            raise ConfigError(
                f"unsupported autoencoder override(s): {sorted(unknown)}; "
                f"allowed: {sorted(_AE_OVERRIDE_KEYS)}"
            )


def _resolve(base: Path, value: str | None) -> str | None:
    if value is None:
        return None
    path = Path(value)
    return str(path if path.is_absolute() else (base / path).resolve())


def load_run_config(path: str | Path) -> tuple[RunConfig, dict]:
    """Parse a JSON run config; relative paths resolve against the file.

    Returns the config plus the normalized dict echoed into the manifest.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a JSON object")

    base = path.parent
    known_top = {
        "cube_header", "cube_data", "wavelengths_path", "mask_header", "mask_data",
        "labels_header", "labels_data", "reference_map_header", "out_dir", "seed",
        "preprocess", "autoencoder", "d", "k", "postprocess", "baseline",
    }
    unknown = set(raw) - known_top
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    if "cube_header" not in raw:
        raise ConfigError("config is missing required key 'cube_header'")
    if "out_dir" not in raw:
        raise ConfigError("config is missing required key 'out_dir'")

    cfg = dict(raw)
    for key in ("cube_header", "cube_data", "wavelengths_path", "mask_header", "mask_data",
                "labels_header", "labels_data", "reference_map_header", "out_dir"):
        if key in cfg:
            cfg[key] = _resolve(base, cfg[key])

    pp_raw = dict(cfg.pop("preprocess", {}))
    if "ratio_rois" in pp_raw and pp_raw["ratio_rois"] is not None:
        pp_raw["ratio_rois"] = [tuple(int(v) for v in roi) for roi in pp_raw["ratio_rois"]]
    if pp_raw.get("mask_path"):
        pp_raw["mask_path"] = _resolve(base, pp_raw["mask_path"])
    try:
        pp = PreprocessConfig(**pp_raw)
    except TypeError as exc:
        raise ConfigError(f"bad preprocess section: {exc}") from exc

    post_raw = dict(cfg.pop("postprocess", {}))
    base_raw = dict(cfg.pop("baseline", {}))
    try:
        post = PostprocessConfig(**post_raw)
        baseline = BaselineConfig(**base_raw)
    except TypeError as exc:
        raise ConfigError(f"bad postprocess/baseline section: {exc}") from exc

    ae = dict(cfg.pop("autoencoder", {}))
    if "hidden_dims" in ae:
        ae["hidden_dims"] = tuple(int(v) for v in ae["hidden_dims"])

    config = RunConfig(preprocess=pp, postprocess=post, baseline=baseline,
                       autoencoder=ae, **cfg)

    echo = {
        "cube_header": config.cube_header,
        "cube_data": config.cube_data,
        "wavelengths_path": config.wavelengths_path,
        "mask_header": config.mask_header,
        "mask_data": config.mask_data,
        "labels_header": config.labels_header,
        "labels_data": config.labels_data,
        "reference_map_header": config.reference_map_header,
        "out_dir": config.out_dir,
        "seed": config.seed,
        "d": config.d,
        "k": config.k,
        "preprocess": {
            "workflow": pp.workflow,
            "clip_lo": pp.clip_lo,
            "clip_hi": pp.clip_hi,
            "wl_min": pp.wl_min,
            "wl_max": pp.wl_max,
            "ratio_rois": [list(r) for r in pp.ratio_rois] if pp.ratio_rois else None,
            "continuum_removal": pp.continuum_removal,
            "mask_path": pp.mask_path,
        },
        "autoencoder": {k: (list(v) if isinstance(v, tuple) else v) for k, v in ae.items()},
        "postprocess": {"enabled": post.enabled, "angle_threshold": post.angle_threshold},
        "baseline": {"enabled": baseline.enabled, "n_components": baseline.n_components,
                     "k": baseline.k},
    }
    return config, echo


@dataclass
class MethodResult:
    cluster_map: ClusterMap
    embedding_report: MetricsReport
    spectral_report: MetricsReport
    merge_trace: list


@dataclass
class RunResult:
    out_dir: Path
    d: int
    k: int
    gypsum: MethodResult
    baseline: MethodResult | None
    manifest: dict
    timings: dict


def _jsonify(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats stringified."""
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonify(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)  # 'inf', '-inf', 'nan'
    return obj


def _write_json(path: Path, payload: dict, written: list[Path]) -> None:
    path.write_text(json.dumps(_jsonify(payload), indent=2, sort_keys=True) + "\n")
    written.append(path)


class _Stages:
    def __init__(self):
        self.timings: dict[str, float] = {}

    @contextmanager
    def run(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except StageFailure:
            raise
        except Exception as exc:
            raise StageFailure(name, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - start


def _truth_vector(labels_raster, matrix: PixelMatrix) -> np.ndarray | None:
    if labels_raster is None:
        return None
    if labels_raster.labels.shape[0] < matrix.origin[:, 0].max() + 1 or \
            labels_raster.labels.shape[1] < matrix.origin[:, 1].max() + 1:
        raise ConfigError("truth label raster is smaller than the cube")
    return labels_raster.labels[matrix.origin[:, 0], matrix.origin[:, 1]]


def _reference_map(header_path: str) -> ClusterMap:
    labels = ingest.read_cluster_labels(header_path)
    k = int(labels.max()) + 1
    if k < 1:
        raise ConfigError("reference map has no labelled pixels")
    sizes = np.array([(labels == c).sum() for c in range(k)], dtype=np.int64)
    palette_path = Path(header_path).with_suffix(".palette.json")
    if palette_path.exists():
        palette = [tuple(c) for c in json.loads(palette_path.read_text())]
        if len(palette) < k:
            raise ConfigError(f"{palette_path} covers {len(palette)} clusters, need {k}")
    else:
        palette = ingest.default_palette(k)
    return ClusterMap(labels=labels, k=k, cluster_means=np.zeros((k, 1)),
                      cluster_sizes=sizes, palette=palette)


def _write_map_artifacts(cmap: ClusterMap, grid, out_dir: Path, prefix: str,
                         written: list[Path]) -> None:
    png = out_dir / f"{prefix}.png"
    hdr = out_dir / f"{prefix}.hdr"
    img = out_dir / f"{prefix}.img"
    ingest.write_cluster_map(cmap, png, hdr, img)
    written += [png, hdr, img]
    pal = out_dir / f"{prefix}.palette.json"
    pal.write_text(json.dumps([list(c) for c in cmap.palette]) + "\n")
    written.append(pal)
    csv_path = out_dir / f"{prefix.replace('cluster_map', 'cluster_means')}.csv"
    ingest.write_cluster_means_csv(cmap, grid, csv_path)
    written.append(csv_path)


def _score_method(cmap: ClusterMap, matrix: PixelMatrix, points: np.ndarray,
                  space: str, truth) -> tuple[MetricsReport, MetricsReport]:
    flat = cmap.labels_for(matrix.origin)
    emb = evaluate(points, flat, truth=truth, k=cmap.k, space=space)
    spec = evaluate(matrix.spectra, flat, truth=truth, k=cmap.k, space="spectral")
    return emb, spec


def run_pipeline(config: RunConfig, config_echo: dict | None = None) -> RunResult:
    """Execute the full run described by ``config``; see the module docstring.

    Any stage error aborts the run, removes files this run already wrote,
    and is re-raised wrapped in StageFailure naming the stage.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        lock_fh = open(lock, "x")
    except FileExistsError:
        raise FileExistsError(
            f"{lock} exists: another run owns this output directory "
            "(remove the lockfile if that run is dead)"
        ) from None
    lock_fh.close()

    written: list[Path] = []
    stages = _Stages()
    try:
        with stages.run("ingest"):
            wavelengths = None
            if config.wavelengths_path is not None:
                wavelengths = np.loadtxt(config.wavelengths_path, dtype=np.float64, ndmin=1)
            cube = ingest.read_envi(config.cube_header, config.cube_data, wavelengths)
            mask = None
            if config.mask_header is not None:
                mask = ingest.read_mask(config.mask_header, config.mask_data)
            truth_raster = None
            if config.labels_header is not None:
                truth_raster = ingest.read_label_raster(config.labels_header, config.labels_data)
            reference = None
            if config.reference_map_header is not None:
                reference = _reference_map(config.reference_map_header)

        with stages.run("preprocess"):
            matrix = preprocess(cube, config.preprocess, mask)
            truth = _truth_vector(truth_raster, matrix)

        subspace_costs = None
        if config.d is None:
            with stages.run("subspace"):
                noise = estimate_noise(matrix)
                sub = estimate_dimension(matrix, noise)
                d = sub.d
                subspace_costs = sub.per_direction_cost
        else:
            d = config.d

        with stages.run("autoencoder"):
            ae_config = AeConfig(input_dim=matrix.w, embed_dim=d, seed=config.seed,
                                 **config.autoencoder)
            model = train(matrix, ae_config)
            embedding = encode_all(model, matrix)

        with stages.run("cluster"):
            k = cluster_count(d, config.k)
            gmm = gmm_fit(embedding.z, k, config.seed)
            labels = gmm_assign(gmm, embedding.z)
            cmap = build_cluster_map(labels, matrix, cube.rows, cube.cols)

        merge_trace: list = []
        if config.postprocess.enabled:
            with stages.run("postprocess"):
                cmap = merge_clusters(cmap, matrix, config.postprocess.angle_threshold,
                                      trace=merge_trace)

        with stages.run("palette"):
            if reference is not None:
                cmap.palette = ingest.match_palette(cmap, reference)
            else:
                cmap.palette = ingest.default_palette(cmap.k)

        with stages.run("metrics"):
            emb_report, spec_report = _score_method(cmap, matrix, embedding.z,
                                                    "embedding", truth)
        gypsum_result = MethodResult(cluster_map=cmap, embedding_report=emb_report,
                                     spectral_report=spec_report, merge_trace=merge_trace)

        baseline_result = None
        if config.baseline.enabled:
            with stages.run("baseline"):
                baseline_result = _run_baseline_on(matrix, config, k, cube.rows, cube.cols,
                                                   reference, truth)

        with stages.run("report"):
            _write_map_artifacts(cmap, matrix.grid, out_dir, "cluster_map", written)
            if baseline_result is not None:
                _write_map_artifacts(baseline_result.cluster_map, matrix.grid, out_dir,
                                     "baseline_cluster_map", written)

            metrics_payload = {
                "schema_version": SCHEMA_VERSION,
                "gypsum": {
                    "k": cmap.k,
                    "embedding": emb_report.to_dict(),
                    "spectral": spec_report.to_dict(),
                    "merge_trace": merge_trace,
                },
            }
            if baseline_result is not None:
                metrics_payload["baseline"] = {
                    "k": baseline_result.cluster_map.k,
                    "embedding": baseline_result.embedding_report.to_dict(),
                    "spectral": baseline_result.spectral_report.to_dict(),
                    "merge_trace": baseline_result.merge_trace,
                }
            _write_json(out_dir / "metrics.json", metrics_payload, written)

            manifest = {
                "schema_version": SCHEMA_VERSION,
                "config": config_echo,
                "seed": config.seed,
                "embedding_dim": d,
                "embedding_dim_source": "override" if config.d is not None else "subspace",
                "cluster_count": k,
                "cluster_count_source": "override" if config.k is not None else "2d",
                "subspace_costs": subspace_costs,
                "train_loss": model.loss_history[-1] if model.loss_history else None,
                "final_cluster_count": cmap.k,
                "baseline": None if baseline_result is None else {
                    "n_components": config.baseline.n_components,
                    "k": baseline_result.cluster_map.k,
                },
            }
            _write_json(out_dir / "manifest.json", manifest, written)
            _write_json(out_dir / "timings.json", {"seconds": stages.timings}, [])

        return RunResult(out_dir=out_dir, d=d, k=k, gypsum=gypsum_result,
                         baseline=baseline_result, manifest=manifest,
                         timings=stages.timings)
    except BaseException:
        for path in written:
            try:
                path.unlink()
            except OSError:
                pass
        raise
    finally:
        lock.unlink(missing_ok=True)


def _run_baseline_on(matrix: PixelMatrix, config: RunConfig, pipeline_k: int,
                     rows: int, cols: int, reference, truth) -> MethodResult:
    n_comp = min(config.baseline.n_components, min(matrix.p, matrix.w))
    components, projected = pca(matrix.spectra, n_comp)
    bk = config.baseline.k if config.baseline.k is not None else pipeline_k
    _, labels = kmeans_fit(projected, bk, config.seed)
    bmap = build_cluster_map(labels, matrix, rows, cols)
    trace: list = []
    if config.postprocess.enabled:
        bmap = merge_clusters(bmap, matrix, config.postprocess.angle_threshold, trace=trace)
    if reference is not None:
        bmap.palette = ingest.match_palette(bmap, reference)
    else:
        bmap.palette = ingest.default_palette(bmap.k)
    emb_report, spec_report = _score_method(bmap, matrix, projected, "pca", truth)
    return MethodResult(cluster_map=bmap, embedding_report=emb_report,
                        spectral_report=spec_report, merge_trace=trace)


def run_baseline(cube: HsiCube, config: RunConfig, mask: PixelMask | None = None
                 ) -> MethodResult:
    """Standalone PCA + k-means baseline over the same preprocessing chain."""
    matrix = preprocess(cube, config.preprocess, mask)
    if config.k is not None:
        k = config.k
    else:
        noise = estimate_noise(matrix)
        k = cluster_count(estimate_dimension(matrix, noise).d)
    return _run_baseline_on(matrix, config, k, cube.rows, cube.cols, None, None)
