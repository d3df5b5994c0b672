"""Command-line runner for two-stage GSURE reconstruction experiments.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 numeric or statistics failure, 1 anything else (including I/O errors).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .config import METHODS, ExperimentConfig, load_config
from .errors import ConfigError, ReconError
from .tensorcore import load_tensor

PGM_MAX = 255


def write_pgm(path, gray: np.ndarray) -> Path:
    """Binary (P5) 8-bit PGM."""
    path = Path(path)
    gray = np.asarray(gray, dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n{PGM_MAX}\n".encode("ascii"))
        fh.write(gray.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ConfigError(f"{path} is not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w), maxval


def to_gray(values: np.ndarray, scale: float) -> np.ndarray:
    """Map ``values / scale`` in [0, 1] to 0..255, clipping instead of wrapping."""
    if not scale > 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round(np.clip(values / scale, 0.0, 1.0) * PGM_MAX).astype(np.uint8)


def quicklook(path, out=None, ref=None, brightness: float = 2.5) -> Path:
    """Magnitude PGM scaled to the 99th percentile, or a difference image against ``ref``.

    Difference images use the reference's 99th percentile as full scale and
    are multiplied by ``brightness`` before clipping.
    """
    path = Path(path)
    img = load_tensor(path)
    if img.ndim != 2:
        raise ConfigError(f"quicklook expects a 2D image, {path} has shape {img.shape}")
    if ref is None:
        mag = np.abs(img)
        gray = to_gray(mag, float(np.percentile(mag, 99)))
        out = out or path.with_suffix(".pgm")
    else:
        base = load_tensor(ref)
        if base.shape != img.shape:
            raise ConfigError(f"reference shape {base.shape} != image shape {img.shape}")
        scale = float(np.percentile(np.abs(base), 99))
        gray = to_gray(brightness * np.abs(img - base), scale)
        out = out or path.with_name(path.stem + "_diff.pgm")
    return write_pgm(out, gray)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.workers is not None:
        updates["workers"] = args.workers
    if args.out is not None:
        updates["out_dir"] = args.out
    return replace(cfg, **updates).validate() if updates else cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsurerecon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI experiment config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override [experiment] seed")
        p.add_argument("--workers", type=int, help="override [experiment] workers")
        p.add_argument("--out", help="override [experiment] out_dir")
        p.add_argument("--force", action="store_true", help="rebuild artifacts whose config changed")

    common(sub.add_parser("gen-data", help="simulate train/val datasets across the SNR grid"))
    p = sub.add_parser("train", help="train one stage")
    common(p)
    p.add_argument("--stage", required=True, choices=("denoiser", "edm", "modl"))
    p = sub.add_parser("reconstruct", help="reconstruct the validation sets")
    common(p)
    p.add_argument("--method", action="append", help=f"one of {', '.join(METHODS)} (repeatable; default all)")
    common(sub.add_parser("evaluate", help="metrics, statistics, tables and figures"))
    common(sub.add_parser("run", help="gen-data, train, reconstruct and evaluate in order"))
    p = sub.add_parser("quicklook", help="write a PGM preview of a CXT image")
    p.add_argument("path")
    p.add_argument("--ref", help="reference CXT; writes a difference image")
    p.add_argument("--out", help="output PGM path")
    p.add_argument("--brightness", type=float, default=2.5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = lambda msg: print(msg, flush=True)  # noqa: E731
    try:
        if args.command == "quicklook":
            log(str(quicklook(args.path, args.out, args.ref, args.brightness)))
            return 0
        cfg = _config(args)
        if args.command == "gen-data":
            pipeline.logged(cfg, "gen-data", pipeline.gen_data, cfg, args.force, log)
        elif args.command == "train":
            pipeline.logged(cfg, f"train {args.stage}", pipeline.train, cfg, args.stage, args.force, log)
        elif args.command == "reconstruct":
            if args.method and set(args.method) - set(METHODS):
                raise ConfigError(f"unknown method tag(s) {sorted(set(args.method) - set(METHODS))}")
            pipeline.logged(cfg, "reconstruct", pipeline.reconstruct, cfg, args.method, args.force, log)
        elif args.command == "evaluate":
            pipeline.logged(cfg, "evaluate", pipeline.evaluate, cfg, args.force, log)
        elif args.command == "run":
            pipeline.run_all(cfg, args.force, log)
        return 0
    except ReconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
