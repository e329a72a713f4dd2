"""Command-line entry point.

Subcommands:

* ``score``          score a clip manifest, optionally emitting per-frame
                     inconsistency maps and grayscale heatmaps;
* ``gen-warp``       synthesize deformation-injection benchmark clips;
* ``gen-occlusion``  synthesize sudden-appearance benchmark clips;
* ``eval``           compare emitted maps/scores against ground truth;
* ``gradcheck``      verify analytic loss gradients against central
                     finite differences.

Exit codes: 0 success, 1 check failed, 2 usage or validation error,
3 missing inputs.  All commands are deterministic given flags and seeds,
including across ``--jobs`` settings; outputs are written atomically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import consistency_metric as cm
from . import evaluation as ev
from . import metric_gradients as mg
from . import scene_synth as ss
from . import warp_synth as ws
from .errors import (
    DomainError,
    FormatError,
    MissingInputError,
    SchemaError,
    ShapeError,
    SolveError,
    SpecError,
    ValidationError,
    VidgeomError,
)
from .tensor_io import Raster2D, read_raster, write_clip_tree, write_json_atomic, write_raster

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_MISSING = 3

_USAGE_ERRORS = (SchemaError, ValidationError, DomainError, ShapeError, SolveError, SpecError, FormatError)
CUES = ("motion", "structure", "fused")


def _positive(kind, name):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"{name} must be positive, got {value}")
        return value

    return parse


def _odd_window(text):
    value = int(text)
    if value < 3 or value % 2 == 0:
        raise argparse.ArgumentTypeError(f"window must be an odd count >= 3, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidgeom", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score a clip manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--window", type=_odd_window, default=cm.DEFAULT_WINDOW)
    p.add_argument("--tau", type=_positive(float, "tau"), default=0.02)
    p.add_argument("--eval-fps", type=_positive(float, "eval-fps"), default=cm.DEFAULT_EVAL_FPS)
    p.add_argument("--window-seconds", type=_positive(float, "window-seconds"),
                   default=cm.DEFAULT_WINDOW_SECONDS)
    p.add_argument("--overlap", type=float, default=cm.DEFAULT_OVERLAP)
    p.add_argument("--emit-maps", action="store_true", help="write per-frame cue maps as rasters")
    p.add_argument("--heatmaps", action="store_true", help="write 8-bit grayscale PNG heatmaps")
    p.add_argument("--heatmap-range", type=_positive(float, "heatmap-range"), default=0.2)
    p.add_argument("--jobs", type=_positive(int, "jobs"), default=1)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gen-warp", help="generate deformation benchmark clips")
    p.add_argument("spec", type=Path, help="generation spec JSON")
    p.add_argument("out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=_positive(int, "jobs"), default=1)
    p.add_argument("--full-scale", action="store_true",
                   help="override clip/frame counts with the 200x20 preset")
    p.set_defaults(func=cmd_gen_warp)

    p = sub.add_parser("gen-occlusion", help="generate occlusion benchmark clips")
    p.add_argument("spec", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=_positive(int, "jobs"), default=1)
    p.add_argument("--full-scale", action="store_true", help="override clip count with the 30-clip preset")
    p.set_defaults(func=cmd_gen_occlusion)

    p = sub.add_parser("eval", help="evaluate emitted maps/scores against ground truth")
    p.add_argument("pred_dir", type=Path)
    p.add_argument("gt_dir", type=Path)
    p.add_argument("--task", choices=("localize", "anomaly", "occlusion"), required=True)
    p.add_argument("--cue", choices=CUES, default="fused")
    p.add_argument("--gt-threshold", type=float, default=0.5,
                   help="binarization threshold (px) for ground-truth magnitude")
    p.add_argument("--out", type=Path, default=None, help="report JSON path")
    p.add_argument("--jobs", type=_positive(int, "jobs"), default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("manifest", type=Path)
    p.add_argument("--centers", default="", help="comma-separated center frames (default: middle frame)")
    p.add_argument("--offsets", default="1,-1", help="comma-separated temporal offsets")
    p.add_argument("--samples", type=_positive(int, "samples"), default=40)
    p.add_argument("--fd-step", type=float, default=1e-3, help="flow perturbation in px")
    p.add_argument("--fd-depth-rel", type=float, default=1e-4, help="relative depth perturbation")
    p.add_argument("--tau", type=_positive(float, "tau"), default=0.02)
    p.add_argument("--tol", type=_positive(float, "tol"), default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pixel-mean", action="store_true")
    p.add_argument("--corrupt-gradients", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VidgeomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


# --------------------------------------------------------------------------
# score
# --------------------------------------------------------------------------


def _write_png(gray: np.ndarray, path: Path) -> None:
    from PIL import Image

    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    Image.fromarray(gray, mode="L").save(tmp, format="PNG")
    os.replace(tmp, path)


def heatmap_image(raster: Raster2D, value_range: float) -> np.ndarray:
    """Clamp map values to [0, range] and quantize to 8-bit grayscale."""
    vals = raster.plane().astype(np.float64)
    ok = raster.valid_mask()
    scaled = np.clip(vals / value_range, 0.0, 1.0) * 255.0
    return np.where(ok, np.rint(scaled), 0.0).astype(np.uint8)


def _localization_motion(maps: cm.PairMaps) -> Raster2D:
    # motion values with zeros where the cue is suppressed, on the fused domain
    return Raster2D(data=maps.motion.data.copy(), mask=maps.fused.valid_mask())


def cmd_score(args) -> int:
    clip = cm.ClipData.from_path(args.manifest)
    video = cm.score_clip(
        clip,
        window=args.window,
        tau=args.tau,
        eval_fps=args.eval_fps,
        window_seconds=args.window_seconds,
        overlap=args.overlap,
        jobs=args.jobs,
    )
    keep_maps = args.emit_maps or args.heatmaps
    frames = cm.frame_level_scores(
        clip, window=args.window, tau=args.tau, eval_fps=args.eval_fps, jobs=args.jobs,
        keep_maps=keep_maps,
    )

    out_dir = args.out / clip.clip_id
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "clip_id": clip.clip_id,
        "params": {
            "window": args.window,
            "tau": args.tau,
            "eval_fps": args.eval_fps,
            "window_seconds": args.window_seconds,
            "overlap": args.overlap,
        },
        **video.to_json(),
        "frame_scores": [score.to_json() for score, _ in frames],
    }
    write_json_atomic(doc, out_dir / "score.json")

    if keep_maps:
        maps_dir = out_dir / "maps"
        heat_dir = out_dir / "heatmaps"
        if args.emit_maps:
            maps_dir.mkdir(exist_ok=True)
        if args.heatmaps:
            heat_dir.mkdir(exist_ok=True)
        for score, maps in frames:
            cue_rasters = {
                "motion": _localization_motion(maps),
                "structure": maps.structure,
                "fused": maps.fused,
            }
            for cue, raster in cue_rasters.items():
                if args.emit_maps:
                    write_raster(raster, maps_dir / f"center_{score.center_index:04d}_{cue}.gcr")
                if args.heatmaps:
                    _write_png(
                        heatmap_image(raster, args.heatmap_range),
                        heat_dir / f"center_{score.center_index:04d}_{cue}.png",
                    )
    print(f"{clip.clip_id}: motion={video.motion:.6g} structure={video.structure:.6g} "
          f"fused={video.fused:.6g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# benchmark generation
# --------------------------------------------------------------------------


def _load_spec_json(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: spec must be a JSON object")
    return doc


def _run_jobs(tasks, worker, jobs: int):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(worker, tasks))
    return [worker(t) for t in tasks]


def cmd_gen_warp(args) -> int:
    spec = _load_spec_json(args.spec)
    n_clips = int(spec.get("clips", 4))
    n_frames = int(spec.get("frames", 8))
    if args.full_scale:
        n_clips, n_frames = 200, 20
    width = int(spec.get("width", 256))
    height = int(spec.get("height", 192))
    fps = float(spec.get("fps", 8.0))
    mode = spec.get("mode", "single")
    if mode not in ("single", "all"):
        raise SchemaError(f"mode must be 'single' or 'all', got '{mode}'")
    window = int(spec.get("window", cm.DEFAULT_WINDOW))
    deform = ws.DeformClipSpec(
        control_count=int(spec.get("control_count", 8)),
        displacement_scale=float(spec.get("displacement_scale", 6.0)),
        omega=float(spec.get("omega", 0.4)),
        ema_beta=float(spec.get("ema_beta", 0.7)),
        feather_radius=float(spec.get("feather_radius", 15.0)),
        mask_threshold=float(spec.get("mask_threshold", 0.5)),
        region=spec.get("region", "disk"),
        region_fraction=float(spec.get("region_fraction", 0.35)),
    )
    if not args.out.parent.exists():
        raise ValidationError(f"parent of output directory does not exist: {args.out.parent}")

    def build(index: int):
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, index]))
        scene = ss.preset_warp_scene(width, height, n_frames, fps, rng)
        base = ss.generate_rigid_clip(
            scene, clip_id=f"warp_{index:03d}", flow_offsets=ss.default_flow_offsets(window)
        )
        if mode == "single":
            margin = (window - 1) // 2
            warped = [int(rng.integers(margin, n_frames - margin))]
        else:
            warped = list(range(n_frames))
        clip, _ = ws.generate_warp_clip(base, deform, warped, seed=int(rng.integers(2**31)))
        write_clip_tree(clip, args.out / clip.clip_id)
        return clip.clip_id

    ids = _run_jobs(range(n_clips), build, args.jobs)
    print(f"generated {len(ids)} clips under {args.out}")
    return EXIT_OK


def cmd_gen_occlusion(args) -> int:
    spec = _load_spec_json(args.spec)
    n_clips = int(spec.get("clips", 2))
    n_frames = int(spec.get("frames", 20))
    if args.full_scale:
        n_clips = 30
    width = int(spec.get("width", 256))
    height = int(spec.get("height", 192))
    fps = float(spec.get("fps", 8.0))
    occluded_frames = int(spec.get("occluded_frames", 1))
    reveal_frame = spec.get("reveal_frame")
    window = int(spec.get("window", cm.DEFAULT_WINDOW))
    if not args.out.parent.exists():
        raise ValidationError(f"parent of output directory does not exist: {args.out.parent}")

    def build(index: int):
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, index]))
        scene, event = ss.preset_occlusion(
            width, height, n_frames, fps, rng,
            occluded_frames=occluded_frames,
            reveal_frame=int(reveal_frame) if reveal_frame is not None else None,
        )
        clip, _ = ss.generate_occlusion_clip(
            scene, event, clip_id=f"occl_{index:03d}", flow_offsets=ss.default_flow_offsets(window)
        )
        write_clip_tree(clip, args.out / clip.clip_id)
        return clip.clip_id

    ids = _run_jobs(range(n_clips), build, args.jobs)
    print(f"generated {len(ids)} clips under {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def _clip_dirs(root: Path) -> dict[str, Path]:
    if not root.is_dir():
        raise MissingInputError(f"directory not found: {root}")
    return {p.name: p for p in sorted(root.iterdir()) if p.is_dir()}


def _gt_cases(gt_dir: Path, threshold: float):
    """(frame_index, gt_mask, gt_magnitude raster or None) per GT entry."""
    from .tensor_io import load_manifest

    manifest = load_manifest(gt_dir / "manifest.json")
    cases = []
    for entry in manifest.ground_truth:
        magnitude = None
        mask = None
        if entry.displacement_path is not None:
            disp = read_raster(entry.displacement_path)
            mag = np.hypot(
                disp.data[:, :, 0].astype(np.float64), disp.data[:, :, 1].astype(np.float64)
            )
            magnitude = Raster2D(data=mag.astype(np.float32), mask=disp.mask)
            mask = mag > threshold
        if entry.mask_path is not None:
            mask = read_raster(entry.mask_path).plane() > 0.5
        if mask is None:
            continue
        cases.append((entry.frame_index, mask, magnitude))
    return manifest, cases


def _motion_stats_from_manifest(manifest) -> tuple[float, float] | None:
    flows = [f for f in manifest.flows if f.to_index == f.from_index + 1]
    flows.sort(key=lambda f: f.from_index)
    if not flows:
        return None
    rasters = [read_raster(f.flow_path) for f in flows]
    stats = ev.motion_stats(rasters, manifest.fps)
    return stats.total_motion, stats.mean_motion


def cmd_eval(args) -> int:
    pred = _clip_dirs(args.pred_dir)
    gt = _clip_dirs(args.gt_dir)
    unpaired = sorted(set(pred) ^ set(gt))
    if unpaired:
        print(f"error: unpaired clip_ids: {', '.join(unpaired)}", file=sys.stderr)
        return EXIT_MISSING

    def eval_clip(clip_id: str) -> dict:
        report: dict = {"clip_id": clip_id, "per_frame": [],
                        "ap": None, "iou": None, "f1": None, "srcc": None,
                        "anomaly_accuracy": None, "total_motion": None, "mean_motion": None}
        manifest, cases = _gt_cases(gt[clip_id], args.gt_threshold)
        stats = _motion_stats_from_manifest(manifest)
        if stats is not None:
            report["total_motion"], report["mean_motion"] = stats

        if args.task == "anomaly":
            score_doc = json.loads((pred[clip_id] / "score.json").read_text())
            scores = [f[f"{args.cue}_mean"] for f in score_doc["frame_scores"]]
            indices = [f["center_index"] for f in score_doc["frame_scores"]]
            predicted = indices[ev.anomaly_argmax(scores)]
            truth = {c[0] for c in cases} or {g.frame_index for g in manifest.ground_truth}
            report["anomaly_accuracy"] = 1.0 if predicted in truth else 0.0
            report["predicted_frame"] = predicted
            report["true_frames"] = sorted(truth)
            return report

        per_frame = []
        for frame_index, mask, magnitude in cases:
            map_path = pred[clip_id] / "maps" / f"center_{frame_index:04d}_{args.cue}.gcr"
            if not map_path.exists():
                raise MissingInputError(f"{clip_id}: no emitted map {map_path.name}")
            prediction = read_raster(map_path)
            case = ev.LocalizationCase(prediction=prediction, gt_mask=mask, gt_magnitude=magnitude)
            ap = ev.ranking_ap(case)
            iou, f1 = ev.best_threshold_iou_f1(case)
            entry = {"frame_index": frame_index, "ap": ap, "iou": iou, "f1": f1, "srcc": None}
            if magnitude is not None:
                ok = prediction.valid_mask()
                entry["srcc"] = ev.srcc(
                    prediction.plane()[ok].astype(np.float64),
                    magnitude.plane()[ok].astype(np.float64),
                )
            per_frame.append(entry)
        report["per_frame"] = per_frame
        if per_frame:
            for key in ("ap", "iou", "f1"):
                report[key] = ev.macro_average([e[key] for e in per_frame])
            srccs = [e["srcc"] for e in per_frame if e["srcc"] is not None]
            report["srcc"] = ev.macro_average(srccs) if srccs else None
        return report

    clip_ids = sorted(pred)
    reports = _run_jobs(clip_ids, eval_clip, args.jobs)

    macro: dict = {}
    if args.task == "anomaly":
        macro["anomaly_accuracy"] = ev.macro_average([r["anomaly_accuracy"] for r in reports])
    else:
        frames = [e for r in reports for e in r["per_frame"]]
        if frames:
            for key in ("ap", "iou", "f1"):
                macro[key] = ev.macro_average([e[key] for e in frames])
            srccs = [e["srcc"] for e in frames if e["srcc"] is not None]
            if srccs:
                macro["srcc"] = ev.macro_average(srccs)
    doc = {"task": args.task, "cue": args.cue, "clips": reports, "macro": macro}
    if args.out is not None:
        write_json_atomic(doc, args.out)
    summary = ", ".join(f"{k}={v:.4f}" for k, v in sorted(macro.items()))
    print(f"task={args.task} cue={args.cue} clips={len(reports)} {summary}")
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------


def _parse_int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip() != ""]


def cmd_gradcheck(args) -> int:
    if args.fd_step <= 0 or args.fd_depth_rel <= 0:
        print("error: finite-difference steps must be positive", file=sys.stderr)
        return EXIT_USAGE
    clip = cm.ClipData.from_path(args.manifest)
    indices = clip.frame_indices()
    centers = _parse_int_list(args.centers) or [indices[len(indices) // 2]]
    offsets = _parse_int_list(args.offsets)
    spec = mg.LossSpec(tuple(centers), tuple(offsets), pixel_mean=args.pixel_mean)

    snap = mg.snapshot_clip(clip, spec)
    grad = mg.loss_geo_backward(snap, spec, args.tau)
    rng = np.random.default_rng(args.seed)

    checks = mg.sample_gradient_checks(
        snap, spec, args.tau, grad, rng,
        n_samples=args.samples, fd_flow_step=args.fd_step, fd_depth_rel=args.fd_depth_rel,
    )
    if not checks:
        print("error: no live gradient coordinates to check", file=sys.stderr)
        return EXIT_USAGE
    analytic = np.array([c.analytic for c in checks])
    if args.corrupt_gradients:
        analytic = analytic * 1.5 + 1e-3
    fd = np.array([c.fd for c in checks])
    scale = max(np.percentile(np.abs(fd), 99), 1e-30)
    rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), scale)
    worst = int(np.argmax(rel))
    max_rel = float(rel[worst])
    print(f"checked {len(checks)} coordinates: max relative error {max_rel:.3e} (tol {args.tol:g})")
    if max_rel > args.tol:
        c = checks[worst]
        print(f"worst coordinate: {c.describe()} analytic={analytic[worst]:.6e} fd={fd[worst]:.6e}",
              file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
