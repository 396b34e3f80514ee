"""Command-line front end.

Subcommands: ``run`` executes a pipeline config, ``synth`` generates a
ground-truth scene, ``eval`` rescores saved label rasters. Exit codes:
0 success, 1 configuration error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import ingest
from .errors import ConfigError, EnviFormatError, NumericalError, StageFailure
from .metrics import METRIC_VARIANTS, ari, f1_matched, nmi
from .pipeline import load_run_config, run_pipeline
from .synth import SynthSpec, generate


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="gypsum", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute the clustering pipeline from a config file")
    run.add_argument("--config", required=True, help="JSON run config")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out", default=None, help="override the output directory")

    synth = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--rows", type=int, default=64)
    synth.add_argument("--cols", type=int, default=64)
    synth.add_argument("--bands", type=int, default=50)
    synth.add_argument("--endmembers", type=int, default=5)
    synth.add_argument("--snr", type=float, default=35.0, help="SNR in dB (inf = noiseless)")
    synth.add_argument("--layout", choices=["blocks", "voronoi"], default="blocks")
    synth.add_argument("--mixing", choices=["pure", "dirichlet"], default="pure")
    synth.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("eval", help="recompute supervised metrics from saved rasters")
    ev.add_argument("--pred", required=True, help="predicted cluster-map ENVI header")
    ev.add_argument("--truth", required=True, help="ground-truth label ENVI header")
    ev.add_argument("--out", default=None, help="write the report JSON here as well")
    return parser


def _cmd_run(args) -> int:
    config, echo = load_run_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
        echo["seed"] = args.seed
    if args.out is not None:
        config.out_dir = str(Path(args.out).resolve())
        echo["out_dir"] = config.out_dir
    result = run_pipeline(config, config_echo=echo)
    print(f"wrote {result.out_dir} (d={result.d}, k={result.k}, "
          f"final clusters={result.gypsum.cluster_map.k})")
    return 0


def _cmd_synth(args) -> int:
    spec = SynthSpec(rows=args.rows, cols=args.cols, bands=args.bands,
                     n_endmembers=args.endmembers, snr_db=args.snr,
                     layout=args.layout, mixing=args.mixing, seed=args.seed)
    scene = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ingest.write_envi(out / "cube.hdr", out / "cube.img", scene.cube.data,
                      grid=scene.cube.grid, description="gypsum synthetic cube")
    ingest.write_label_raster(out / "labels.hdr", out / "labels.img", scene.labels)
    with open(out / "endmembers.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["endmember"] + [format(v, "g") for v in scene.cube.grid.centers])
        for i, e in enumerate(scene.endmembers):
            writer.writerow([i + 1] + [repr(float(v)) for v in e])
    (out / "scene.json").write_text(json.dumps({
        "rows": spec.rows, "cols": spec.cols, "bands": spec.bands,
        "n_endmembers": spec.n_endmembers, "layout": spec.layout,
        "mixing": spec.mixing, "snr_db": spec.snr_db, "seed": spec.seed,
        "noise_sigma": scene.noise_sigma,
    }, indent=2, sort_keys=True) + "\n")
    print(f"wrote scene to {out} ({spec.rows}x{spec.cols}x{spec.bands}, "
          f"{spec.n_endmembers} endmembers, sigma={scene.noise_sigma:.6g})")
    return 0


def _cmd_eval(args) -> int:
    pred = ingest.read_cluster_labels(args.pred).ravel()
    truth = ingest.read_label_raster(args.truth).labels.ravel()
    if pred.size != truth.size:
        raise ConfigError("prediction and truth rasters differ in size")
    keep = (pred >= 0) & (truth > 0)
    if not keep.any():
        raise ConfigError("no pixels are both clustered and truth-labelled")
    report = {
        "schema_version": 1,
        "n_scored": int(keep.sum()),
        "f1": f1_matched(pred[keep], truth[keep]),
        "nmi": nmi(pred[keep], truth[keep]),
        "ari": ari(pred[keep], truth[keep]),
        "notes": dict(METRIC_VARIANTS),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "synth":
            return _cmd_synth(args)
        return _cmd_eval(args)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code_for(exc.cause)
    except Exception as exc:  # noqa: BLE001 - single funnel to exit codes
        print(f"error: {exc}", file=sys.stderr)
        code = _exit_code_for(exc)
        if code is None:
            raise
        return code


def _exit_code_for(exc: BaseException) -> int | None:
    if isinstance(exc, ConfigError):
        return 1
    if isinstance(exc, (EnviFormatError, OSError)):
        return 2
    if isinstance(exc, (NumericalError, ValueError, ArithmeticError, np.linalg.LinAlgError)):
        return 3
    return None


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
