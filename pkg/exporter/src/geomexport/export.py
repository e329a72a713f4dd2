"""Clip export and boundary validation.

``export_clip`` runs the configured backends over a directory of frames
and writes a clip manifest plus GCR1 rasters the scoring engine can load
directly.  Poses are re-based so frame 0 is the world origin (the scoring
metric is scale-invariant, so the estimator's scale is kept).  With a flow
downscale factor, everything the manifest references (depth, flow,
intrinsics) is emitted at the reduced resolution so all rasters of a frame
pair share one geometry.

``validate_export`` re-reads an emitted manifest and applies the same
invariants the scoring engine enforces on load, plus sanity statistics
(depth percentiles, flow-magnitude histogram), returning a report with an
explicit violation list.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backends import BackendError, load_backend
from .gcr import GcrError, read_gcr, write_gcr

ROTATION_TOL = 1e-6


class ExportError(Exception):
    pass


class ValidationError(ExportError):
    pass


@dataclass
class ExporterConfig:
    frames_dir: Path
    output_dir: Path
    geometry_backend: str = "geomexport.backends:ConstantGeometry"
    flow_backend: str = "geomexport.backends:ZeroFlow"
    window: int = 5
    flow_downscale: float = 1.0
    clip_id: str = ""
    fps: float = 8.0

    def __post_init__(self):
        self.frames_dir = Path(self.frames_dir)
        self.output_dir = Path(self.output_dir)
        if not (0.0 < self.flow_downscale <= 1.0):
            raise ExportError(f"flow_downscale must be in (0, 1], got {self.flow_downscale}")
        if self.window < 3 or self.window % 2 == 0:
            raise ExportError(f"window must be an odd count >= 3, got {self.window}")

    @classmethod
    def from_json(cls, path) -> "ExporterConfig":
        doc = json.loads(Path(path).read_text())
        return cls(**doc)


def load_frames(frames_dir: Path) -> np.ndarray:
    paths = sorted(
        p for p in frames_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not paths:
        raise ExportError(f"no frames found under {frames_dir}")
    frames = [np.asarray(Image.open(p).convert("RGB")) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise ExportError(f"frames disagree on resolution: {sorted(shapes)}")
    return np.stack(frames)


def _check_rotation(rot: np.ndarray, frame_index: int) -> None:
    if not np.allclose(rot.T @ rot, np.eye(3), atol=ROTATION_TOL):
        raise ValidationError(f"frame {frame_index}: estimated rotation is not orthonormal")
    if np.linalg.det(rot) < 0.0:
        raise ValidationError(f"frame {frame_index}: estimated rotation has negative determinant")


def _rebase_poses(poses: np.ndarray) -> np.ndarray:
    """Express all poses relative to frame 0 (frame 0 becomes the origin)."""
    r0 = poses[0, :, :3]
    t0 = poses[0, :, 3]
    out = np.empty_like(poses)
    for i, pose in enumerate(poses):
        out[i, :, :3] = r0.T @ pose[:, :3]
        out[i, :, 3] = r0.T @ (pose[:, 3] - t0)
    return out


def _resample_bilinear(img: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    h, w = img.shape[:2]
    xs = np.arange(new_w, dtype=np.float64) * (w / new_w)
    ys = np.arange(new_h, dtype=np.float64) * (h / new_h)
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.minimum(xs.astype(np.int64), w - 2) if w > 1 else np.zeros(new_w, np.int64)
    y0 = np.minimum(ys.astype(np.int64), h - 2) if h > 1 else np.zeros(new_h, np.int64)
    fx = (xs - x0)[None, :]
    fy = (ys - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    v00 = img[np.ix_(y0, x0)]
    v10 = img[np.ix_(y0, x1)]
    v01 = img[np.ix_(y1, x0)]
    v11 = img[np.ix_(y1, x1)]
    return (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10 + (1 - fx) * fy * v01 + fx * fy * v11


def _write_json(doc: dict, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True))
        fh.write("\n")
    os.replace(tmp, path)


def export_clip(config: ExporterConfig) -> Path:
    """Run the backends and write manifest + rasters; returns the manifest path."""
    frames = load_frames(config.frames_dir)
    n, full_h, full_w = frames.shape[:3]
    clip_id = config.clip_id or config.frames_dir.name

    geometry = load_backend(config.geometry_backend)
    flow = load_backend(config.flow_backend)
    try:
        geo = geometry.infer(frames)
    except Exception as exc:
        raise BackendError(f"geometry backend failed: {exc}") from exc

    if geo.depths.shape != (n, full_h, full_w):
        raise ExportError(
            f"geometry backend shape mismatch: {geo.depths.shape} vs {(n, full_h, full_w)}"
        )
    for i in range(n):
        _check_rotation(geo.poses[i, :, :3], i)
    poses = _rebase_poses(np.asarray(geo.poses, dtype=np.float64))

    scale = config.flow_downscale
    out_w, out_h = int(round(full_w * scale)), int(round(full_h * scale))

    out_dir = config.output_dir / clip_id
    out_dir.mkdir(parents=True, exist_ok=True)

    frames_doc = []
    for i in range(n):
        depth = geo.depths[i].astype(np.float64)
        if (out_w, out_h) != (full_w, full_h):
            depth = _resample_bilinear(depth, out_w, out_h)
        if (depth <= 0).any():
            raise ValidationError(f"frame {i}: estimated depth is not strictly positive")
        name = f"depth_{i:04d}.gcr"
        write_gcr(out_dir / name, depth.astype(np.float32))
        fx, fy, cx, cy = (float(v) * scale for v in geo.intrinsics[i])
        frames_doc.append(
            {
                "frame_index": i,
                "depth_path": name,
                "intrinsics": {"fx": fx, "fy": fy, "cx": cx, "cy": cy},
                "pose": poses[i].tolist(),
            }
        )

    half = (config.window - 1) // 2
    flows_doc = []
    for c in range(n):
        for k in range(-half, half + 1):
            i = c + k
            if k == 0 or not (0 <= i < n):
                continue
            try:
                field = flow.infer_pair(frames[c], frames[i])
            except Exception as exc:
                raise BackendError(f"flow backend failed on pair ({c}, {i}): {exc}") from exc
            field = np.asarray(field, dtype=np.float64)
            if field.shape[:2] != (full_h, full_w) or field.shape[2] != 2:
                raise ExportError(f"flow backend shape mismatch on pair ({c}, {i}): {field.shape}")
            if (out_w, out_h) != (full_w, full_h):
                field = np.stack(
                    [_resample_bilinear(field[:, :, ch], out_w, out_h) * scale for ch in (0, 1)],
                    axis=-1,
                )
            name = f"flow_{c:04d}_{i:04d}.gcr"
            write_gcr(out_dir / name, field.astype(np.float32))
            flows_doc.append({"from_index": c, "to_index": i, "flow_path": name})

    manifest = {
        "clip_id": clip_id,
        "frame_count": n,
        "fps": config.fps,
        "frames": frames_doc,
        "flows": flows_doc,
    }
    manifest_path = out_dir / "manifest.json"
    _write_json(manifest, manifest_path)
    # provenance sidecar: which backends produced these numbers
    _write_json(
        {
            "geometry_backend": config.geometry_backend,
            "flow_backend": config.flow_backend,
            "flow_downscale": scale,
            "source_resolution": [full_w, full_h],
        },
        out_dir / "export_info.json",
    )
    return manifest_path


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


@dataclass
class ExportReport:
    violations: list[str] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {"ok": self.ok, "violations": self.violations, "stats": self.stats}


def validate_export(manifest_path) -> ExportReport:
    """Apply the scoring engine's load-time invariants plus sanity statistics."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    report = ExportReport()

    def violated(msg: str):
        report.violations.append(msg)

    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        violated(f"manifest unreadable: {exc}")
        return report

    for key in ("clip_id", "frame_count", "fps", "frames"):
        if key not in doc:
            violated(f"missing field '{key}'")
    if report.violations:
        return report

    n = doc["frame_count"]
    seen = set()
    resolutions = {}
    depth_values = []
    for fd in doc.get("frames", []):
        idx = fd.get("frame_index")
        if idx in seen:
            violated(f"duplicate frame_index {idx}")
        seen.add(idx)
        pose = np.asarray(fd.get("pose", []), dtype=np.float64)
        if pose.shape != (3, 4):
            violated(f"frame {idx}: pose is not 3x4")
        else:
            rot = pose[:, :3]
            if not np.allclose(rot.T @ rot, np.eye(3), atol=ROTATION_TOL):
                violated(f"frame {idx}: rotation not orthonormal")
            elif np.linalg.det(rot) < 0:
                violated(f"frame {idx}: rotation determinant negative")
        try:
            data, mask = read_gcr(root / fd["depth_path"])
        except (OSError, GcrError, KeyError) as exc:
            violated(f"frame {idx}: depth raster unreadable: {exc}")
            continue
        valid = mask if mask is not None else np.ones(data.shape[:2], bool)
        bad = ~np.isfinite(data[:, :, 0]) & valid
        if bad.any():
            yy, xx = np.argwhere(bad)[0]
            violated(f"frame {idx}: non-finite depth under true mask at pixel ({yy}, {xx})")
        if (data[:, :, 0][valid] <= 0).any():
            violated(f"frame {idx}: non-positive depth under true mask")
        resolutions[idx] = (data.shape[0], data.shape[1])
        depth_values.append(data[:, :, 0][valid])
    if seen != set(range(n)):
        violated(f"frame_index values not dense in [0, {n})")

    flow_mags = []
    for fl in doc.get("flows", []):
        a, b = fl.get("from_index"), fl.get("to_index")
        if a == b or a not in seen or b not in seen:
            violated(f"flow ({a}, {b}): bad frame references")
            continue
        try:
            data, mask = read_gcr(root / fl["flow_path"])
        except (OSError, GcrError, KeyError) as exc:
            violated(f"flow ({a}, {b}): raster unreadable: {exc}")
            continue
        if data.shape[2] != 2:
            violated(f"flow ({a}, {b}): expected 2 channels, got {data.shape[2]}")
        if (data.shape[0], data.shape[1]) != resolutions.get(a):
            violated(
                f"flow ({a}, {b}): resolution {(data.shape[0], data.shape[1])} does not match "
                f"frame {a} depth {resolutions.get(a)}"
            )
        valid = mask if mask is not None else np.ones(data.shape[:2], bool)
        if valid.any():
            flow_mags.append(np.hypot(data[:, :, 0], data[:, :, 1])[valid])

    if depth_values:
        depths = np.concatenate(depth_values)
        report.stats["depth_percentiles"] = {
            p: float(np.percentile(depths, p)) for p in (5, 25, 50, 75, 95)
        }
    if flow_mags:
        mags = np.concatenate(flow_mags)
        edges = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, np.inf]
        hist, _ = np.histogram(mags, bins=edges)
        report.stats["flow_magnitude_histogram"] = {
            f"[{edges[i]:g}, {edges[i + 1]:g})": int(hist[i]) for i in range(len(hist))
        }
    return report
