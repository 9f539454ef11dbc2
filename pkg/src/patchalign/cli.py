"""Command-line entry point: align / synth / eval / sweep / export.

Configuration precedence is built-in defaults, then the JSON config file
(flat keys mirroring TrainConfig), then explicit command-line flags.  Every
command is deterministic given (config, seed) and writes UTF-8 JSON reports
with sorted keys; wall-clock timings live under the "timings" key so report
comparisons can exclude them.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time

import numpy as np

from . import evaluate, fileio, trainer
from .errors import (
    AlignmentError,
    DegenerateFrameError,
    DivergedError,
    InfeasibleNegativesError,
    InsufficientOverlapError,
    InsufficientTextureError,
    InvalidParameterError,
    PointAtInfinityError,
    ZeroVarianceError,
)
from .geometry import Homography, PsiParams, homography_to_psi, psi_to_homography
from .network import MODE_PSEUDO, MODE_SIAMESE, load_weights, save_weights
from .sampling import Image, normalize_image, warp_image
from .trainer import TrainConfig

EXIT_OK = 0
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_TEXTURE = 4
EXIT_OVERLAP = 5
EXIT_DIVERGED = 6

_CONFIG_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def load_config(path: str | None, seed: int | None, mode: str | None) -> TrainConfig:
    """Merge config file values over defaults, then apply flag overrides."""
    values = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        if not isinstance(doc, dict):
            raise InvalidParameterError(f"{path}: config must be a JSON object")
        unknown = set(doc) - _CONFIG_KEYS
        if unknown:
            raise InvalidParameterError(f"{path}: unknown config keys {sorted(unknown)}")
        values.update(doc)
    if seed is not None:
        values["seed"] = seed
    if mode is not None:
        values["mode"] = {"pseudo": MODE_PSEUDO, "siamese": MODE_SIAMESE}[mode]
    if "log2_scale_range" in values:
        values["log2_scale_range"] = tuple(values["log2_scale_range"])
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise InvalidParameterError(f"bad config: {exc}") from exc


def config_echo(cfg: TrainConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["log2_scale_range"] = list(doc["log2_scale_range"])
    return doc


def _require_inputs(*paths: str) -> None:
    for p in paths:
        if p is not None and not os.path.isfile(p):
            raise FileNotFoundError(f"input file not found: {p}")


def _write_report(path: str, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=1)
        f.write("\n")


def _image_out_name(stem: str, img: Image) -> str:
    return f"{stem}.pgm" if img.channels == 1 else f"{stem}.ppm"


def cmd_align(args) -> int:
    cfg = load_config(args.config, args.seed, args.mode)
    _require_inputs(args.image1, args.image2, args.init_h)
    raw1 = fileio.load_image(args.image1)
    raw2 = fileio.load_image(args.image2)
    if raw1.channels != raw2.channels:
        raise InvalidParameterError("image pair must share a channel count")
    if args.init_h is not None:
        h_init = fileio.load_homography(args.init_h)
        psi_init = homography_to_psi(h_init, raw1.width, raw1.height, cfg.alpha)
    else:
        psi_init = PsiParams.zero(raw1.width, raw1.height, cfg.alpha)

    t0 = time.perf_counter()
    result = trainer.align(raw1, raw2, psi_init, cfg)
    elapsed = time.perf_counter() - t0

    os.makedirs(args.out, exist_ok=True)
    h_est = psi_to_homography(result.psi)
    report = {
        "command": "align",
        "config": config_echo(cfg),
        "inputs": {
            "image1": args.image1,
            "image2": args.image2,
            "init_h": args.init_h,
        },
        "image_size": [raw1.width, raw1.height],
        "image2_size": [raw2.width, raw2.height],
        "seed": cfg.seed,
        "homography": h_est.to_flat(),
        "psi": [float(v) for v in result.psi.psi],
        "levels": result.levels,
        "timings": {"total_seconds": elapsed},
    }
    _write_report(os.path.join(args.out, "report.json"), report)
    save_weights(os.path.join(args.out, "weights.bin"), result.weights)
    overlay = Image((raw1.data + warp_image(raw2, h_est).data) / 2.0)
    fileio.save_image(
        os.path.join(args.out, _image_out_name("overlay", overlay)), overlay
    )
    print(f"align: wrote {args.out}/report.json ({elapsed:.1f}s)")
    return EXIT_OK


def cmd_synth(args) -> int:
    _require_inputs(args.image, args.h_true)
    raw = fileio.load_image(args.image)
    h_true = (
        fileio.load_homography(args.h_true)
        if args.h_true is not None
        else Homography.identity()
    )
    warped = warp_image(raw, h_true.inverse())
    if args.invert:
        warped = Image((1.0 - np.clip(warped.data, 0.0, 1.0)) ** args.gamma)

    rng = np.random.default_rng(args.seed)
    shift = args.perturb * max(raw.width, raw.height)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    t = np.array(
        [
            [1.0, 0.0, shift * math.cos(theta)],
            [0.0, 1.0, shift * math.sin(theta)],
            [0.0, 0.0, 1.0],
        ]
    )
    h_init = Homography(t @ h_true.h)

    os.makedirs(args.out, exist_ok=True)
    fileio.save_image(os.path.join(args.out, _image_out_name("image1", raw)), raw)
    fileio.save_image(os.path.join(args.out, _image_out_name("image2", warped)), warped)
    fileio.save_homography(os.path.join(args.out, "h_true.json"), h_true)
    fileio.save_homography(os.path.join(args.out, "h_init.json"), h_init)
    print(f"synth: wrote pair to {args.out} (perturbation {shift:.2f}px)")
    return EXIT_OK


def _resolve_descriptor_source(args):
    """--weights, --run, or neither (raw/center modes need no weights)."""
    weights = None
    h_est = None
    if args.run is not None:
        report_path = os.path.join(args.run, "report.json")
        weights_path = os.path.join(args.run, "weights.bin")
        _require_inputs(report_path, weights_path)
        weights = load_weights(weights_path)
        with open(report_path, "r", encoding="utf-8") as f:
            h_est = Homography.from_flat(json.load(f)["homography"])
    elif args.weights is not None:
        _require_inputs(args.weights)
        weights = load_weights(args.weights)
    if args.est_h is not None:
        _require_inputs(args.est_h)
        h_est = fileio.load_homography(args.est_h)
    return weights, h_est


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed, args.mode)
    _require_inputs(args.image1, args.image2, args.true_h, args.keypoints)
    weights, h_est = _resolve_descriptor_source(args)
    if args.descriptor == "network" and weights is None:
        raise InvalidParameterError("network descriptor needs --weights or --run")

    img1 = normalize_image(fileio.load_image(args.image1))
    img2 = normalize_image(fileio.load_image(args.image2))
    h_true = fileio.load_homography(args.true_h)

    if args.keypoints is not None:
        frames = fileio.load_keypoints(args.keypoints)
    else:
        eval_cfg = dataclasses.replace(cfg, keypoints_per_image=args.eval_keypoints)
        rng = np.random.default_rng(cfg.seed)
        frames = trainer.sample_keypoints(img1, eval_cfg, rng)

    kept, warped = evaluate.correspondence_frames(frames, h_true, img2.width, img2.height)
    if kept.shape[0] == 0:
        raise InsufficientOverlapError("no evaluation keypoint warps inside image2")
    patches1 = evaluate.extract_patch_array(
        img1, trainer._frames_to_vec(kept), cfg.magnification
    )
    patches2 = evaluate.extract_patch_array(img2, warped, cfg.magnification)

    if args.descriptor == "network":
        desc1 = evaluate.describe_patches(patches1, weights, "first")
        desc2 = evaluate.describe_patches(patches2, weights, "second")
    elif args.descriptor == "raw":
        desc1 = evaluate.raw_patch_descriptors(patches1)
        desc2 = evaluate.raw_patch_descriptors(patches2)
    else:
        desc1 = evaluate.center_pixel_descriptors(patches1)
        desc2 = evaluate.center_pixel_descriptors(patches2)

    match = evaluate.nn_match(desc1, desc2)
    metrics = {
        "ap": evaluate.average_precision(match),
        "n_eval_pairs": int(kept.shape[0]),
        "descriptor": args.descriptor,
    }
    if h_est is not None:
        matches = np.concatenate([kept[:, :2], warped[:, :2]], axis=1)
        metrics["homography_error"] = evaluate.homography_error(
            h_est, matches, img1.width, img1.height
        )
        metrics["estimated_homography"] = h_est.to_flat()

    os.makedirs(args.out, exist_ok=True)
    report = {
        "command": "eval",
        "config": config_echo(cfg),
        "inputs": {
            "image1": args.image1,
            "image2": args.image2,
            "true_h": args.true_h,
            "keypoints": args.keypoints,
        },
        "metrics": metrics,
        "seed": cfg.seed,
    }
    _write_report(os.path.join(args.out, "metrics.json"), report)
    print(f"eval: AP={metrics['ap']:.4f} over {metrics['n_eval_pairs']} pairs")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.seed, args.mode)
    _require_inputs(args.image1, args.image2, args.true_h)
    if args.radius <= 0 or args.step <= 0 or args.radius % args.step != 0:
        raise InvalidParameterError("--radius must be a positive multiple of --step")
    img1 = fileio.load_image(args.image1)
    img2 = fileio.load_image(args.image2)
    h_true = fileio.load_homography(args.true_h)
    psi_true = homography_to_psi(h_true, img1.width, img1.height, cfg.alpha)

    ticks = list(range(-args.radius, args.radius + 1, args.step))
    offsets = [(dx, dy) for dy in ticks for dx in ticks]
    t0 = time.perf_counter()
    grid = evaluate.loss_surface_sweep(img1, img2, psi_true, offsets, cfg)
    elapsed = time.perf_counter() - t0

    os.makedirs(args.out, exist_ok=True)
    n = len(ticks)
    values = np.asarray(grid.values, dtype=float).reshape(n, n)
    report = {
        "command": "sweep",
        "config": config_echo(cfg),
        "inputs": {"image1": args.image1, "image2": args.image2, "true_h": args.true_h},
        "radius": args.radius,
        "step": args.step,
        "offsets": [list(o) for o in grid.offsets],
        "values": grid.values,
        "cell_errors": {str(k): v for k, v in grid.errors.items()},
        "seed": cfg.seed,
        "timings": {"total_seconds": elapsed},
    }
    _write_report(os.path.join(args.out, "sweep.json"), report)
    fileio.save_heatmap(os.path.join(args.out, "heatmap.pgm"), values)
    print(f"sweep: {len(offsets)} cells in {elapsed:.1f}s -> {args.out}/sweep.json")
    return EXIT_OK


def cmd_export(args) -> int:
    report_path = os.path.join(args.run, "report.json")
    _require_inputs(report_path, args.keypoints)
    with open(report_path, "r", encoding="utf-8") as f:
        report = json.load(f)
    cfg = TrainConfig(
        **{
            k: tuple(v) if k == "log2_scale_range" else v
            for k, v in report["config"].items()
        }
    )
    w1, h1 = report["image_size"]
    w2, h2 = report.get("image2_size", report["image_size"])
    psi_star = PsiParams(np.asarray(report["psi"], dtype=float), w1, h1, cfg.alpha)

    if args.keypoints is not None:
        frames = fileio.load_keypoints(args.keypoints)
    else:
        image1 = report["inputs"]["image1"]
        _require_inputs(image1)
        img1 = normalize_image(fileio.load_image(image1))
        rng = np.random.default_rng(cfg.seed)
        frames = trainer.sample_keypoints(img1, cfg, rng)

    pairs = evaluate.export_correspondences(psi_star, frames, w2, h2)
    out_dir = args.out if args.out is not None else args.run
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, "correspondences.txt")
    fileio.save_correspondences(out_path, pairs)
    print(f"export: {pairs.shape[0]} correspondences -> {out_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchalign",
        description="Joint patch-descriptor learning and homography alignment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="RNG seed override")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument(
            "--mode", choices=["siamese", "pseudo"], default=None,
            help="weight sharing mode",
        )

    p = sub.add_parser("align", help="jointly train a descriptor and align a pair")
    p.add_argument("image1")
    p.add_argument("image2")
    p.add_argument("--init-h", default=None, help="initial homography JSON")
    common(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("synth", help="generate a synthetic pair with ground truth")
    p.add_argument("image")
    p.add_argument("--h-true", default=None, help="true homography JSON (default identity)")
    p.add_argument(
        "--perturb", type=float, default=0.0,
        help="initial-homography translation as a fraction of image size",
    )
    p.add_argument("--invert", action="store_true", help="invert the second image")
    p.add_argument("--gamma", type=float, default=1.0, help="gamma applied after inversion")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="descriptor AP and homography error")
    p.add_argument("image1")
    p.add_argument("image2")
    p.add_argument("--true-h", required=True, help="ground-truth homography JSON")
    p.add_argument("--weights", default=None, help="trained weights file")
    p.add_argument("--run", default=None, help="align output directory")
    p.add_argument("--est-h", default=None, help="estimated homography JSON")
    p.add_argument("--keypoints", default=None, help="keypoint text file")
    p.add_argument(
        "--eval-keypoints", type=int, default=2000,
        help="sampled keypoint count when no file is given",
    )
    p.add_argument(
        "--descriptor", choices=["network", "raw", "center"], default="network",
        help="descriptor to evaluate (raw/center are baselines)",
    )
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="misalignment loss-surface sweep")
    p.add_argument("image1")
    p.add_argument("image2")
    p.add_argument("--true-h", required=True, help="ground-truth homography JSON")
    p.add_argument("--radius", type=int, default=100, help="sweep radius, pixels")
    p.add_argument("--step", type=int, default=25, help="sweep step, pixels")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export", help="export correspondences from an align run")
    p.add_argument("--run", required=True, help="align output directory")
    p.add_argument("--keypoints", default=None, help="keypoint text file")
    p.add_argument("--out", default=None, help="output directory (default: run dir)")
    p.set_defaults(func=cmd_export)
    return parser


_ERROR_EXIT = (
    ((InsufficientTextureError, ZeroVarianceError), EXIT_TEXTURE),
    ((InsufficientOverlapError, InfeasibleNegativesError), EXIT_OVERLAP),
    ((DivergedError, PointAtInfinityError, DegenerateFrameError), EXIT_DIVERGED),
    ((InvalidParameterError,), EXIT_CONFIG),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AlignmentError as exc:
        for classes, code in _ERROR_EXIT:
            if isinstance(exc, classes):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"error: bad JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
