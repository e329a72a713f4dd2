"""Raster and manifest I/O.

The binary raster container ("GCR1") is the interchange format between the
scoring engine and any producer of depth/flow/ground-truth rasters.  Layout,
all little-endian:

    bytes 0..3    magic "GCR1"
    u32           width
    u32           height
    u32           channels (1 or 2)
    u8            has_mask (0 or 1)
    f32 * W*H*C   data, row-major, channel-interleaved
    u8  * W*H     mask (only if has_mask), one byte per pixel, 0 or 1

Round trips are bit-exact, including NaN payloads and signed zeros.

Clip manifests are JSON; see ``schema/clip_manifest.v1.json`` in the repo
root for the full field-by-field description.  Raster paths inside a
manifest are resolved relative to the manifest's own directory.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, SchemaError, ValidationError

MAGIC = b"GCR1"
_HEADER = struct.Struct("<4sIIIB")

ROTATION_TOL = 1e-6


@dataclass
class Raster2D:
    """Dense float raster with an optional per-pixel validity mask.

    ``data`` has shape (H, W, C) with C in {1, 2}; ``mask`` is (H, W) bool
    or None (meaning every pixel is valid).  Non-finite values are only
    allowed where the mask is False.  Serialized rasters are always
    float32; in memory, float64 data is preserved (useful when quantization
    would mask an exactness property under test).
    """

    data: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.float64:
            data = data.astype(np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValidationError(f"raster data must be 2- or 3-dimensional, got shape {data.shape}")
        if data.shape[2] not in (1, 2):
            raise ValidationError(f"raster must have 1 or 2 channels, got {data.shape[2]}")
        self.data = data
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != data.shape[:2]:
                raise ValidationError(
                    f"mask shape {mask.shape} does not match raster {data.shape[:2]}"
                )
            self.mask = mask
        bad = ~np.isfinite(self.data)
        if bad.any():
            bad_px = bad.any(axis=2)
            if self.mask is None or (bad_px & self.mask).any():
                raise ValidationError("non-finite raster value at a pixel marked valid")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def valid_mask(self) -> np.ndarray:
        """Mask as a concrete (H, W) bool array (all-True when absent)."""
        if self.mask is None:
            return np.ones(self.data.shape[:2], dtype=bool)
        return self.mask

    def plane(self, channel: int = 0) -> np.ndarray:
        """One channel as an (H, W) float32 view."""
        return self.data[:, :, channel]


def write_raster(raster: Raster2D, path: str | os.PathLike) -> None:
    """Serialize a raster to ``path`` atomically (temp file + rename)."""
    path = Path(path)
    has_mask = raster.mask is not None
    header = _HEADER.pack(MAGIC, raster.width, raster.height, raster.channels, int(has_mask))
    payload = np.ascontiguousarray(raster.data, dtype="<f4").tobytes()
    blob = header + payload
    if has_mask:
        blob += raster.mask.astype(np.uint8).tobytes()
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write raster {path}: {exc}") from exc


def read_raster(path: str | os.PathLike) -> Raster2D:
    """Load a GCR1 raster, validating magic, payload size, and finiteness."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the fixed header")
    magic, width, height, channels, has_mask = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if channels not in (1, 2):
        raise FormatError(f"{path}: unsupported channel count {channels}")
    n_px = width * height
    expected = _HEADER.size + 4 * n_px * channels + (n_px if has_mask else 0)
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, found {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=n_px * channels, offset=_HEADER.size)
    data = data.reshape(height, width, channels).copy()
    mask = None
    if has_mask:
        raw = np.frombuffer(blob, dtype=np.uint8, count=n_px, offset=_HEADER.size + 4 * n_px * channels)
        if not np.isin(raw, (0, 1)).all():
            raise FormatError(f"{path}: mask bytes must be 0 or 1")
        mask = raw.reshape(height, width).astype(bool)
    try:
        return Raster2D(data=data, mask=mask)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# Clip manifests
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameEntry:
    frame_index: int
    depth_path: Path
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray  # (3, 4) world-from-camera, float64


@dataclass(frozen=True)
class FlowEntry:
    from_index: int
    to_index: int
    flow_path: Path


@dataclass(frozen=True)
class GroundTruthEntry:
    frame_index: int
    displacement_path: Optional[Path] = None
    mask_path: Optional[Path] = None


@dataclass
class ClipManifest:
    clip_id: str
    frame_count: int
    fps: float
    frames: list[FrameEntry]
    flows: list[FlowEntry]
    ground_truth: list[GroundTruthEntry] = field(default_factory=list)

    def frame(self, index: int) -> FrameEntry:
        return self._frame_map[index]

    def flow_entry(self, from_index: int, to_index: int) -> Optional[FlowEntry]:
        return self._flow_map.get((from_index, to_index))

    def __post_init__(self):
        self._frame_map = {f.frame_index: f for f in self.frames}
        self._flow_map = {(f.from_index, f.to_index): f for f in self.flows}


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SchemaError(f"missing field '{where}.{key}'" if where else f"missing field '{key}'")
    return obj[key]


def _check_rotation(rot: np.ndarray, frame_index: int) -> None:
    gram = rot.T @ rot
    if not np.allclose(gram, np.eye(3), atol=ROTATION_TOL):
        raise ValidationError(f"frame {frame_index}: rotation block is not orthonormal")
    if np.linalg.det(rot) < 0.0:
        raise ValidationError(f"frame {frame_index}: rotation block has negative determinant")


def load_manifest(path: str | os.PathLike) -> ClipManifest:
    """Parse and validate a clip manifest JSON file.

    Raster paths are resolved against the manifest's directory.  Schema
    problems raise :class:`SchemaError` naming the offending JSON path;
    semantic problems (bad rotations) raise :class:`ValidationError`.
    """
    path = Path(path)
    root = path.parent
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be a JSON object")

    clip_id = _require(doc, "clip_id", "")
    frame_count = _require(doc, "frame_count", "")
    fps = _require(doc, "fps", "")
    if not isinstance(frame_count, int) or frame_count <= 0:
        raise SchemaError("field 'frame_count' must be a positive integer")
    if not isinstance(fps, (int, float)) or fps <= 0:
        raise SchemaError("field 'fps' must be a positive number")

    frames_doc = _require(doc, "frames", "")
    if not isinstance(frames_doc, list) or not frames_doc:
        raise SchemaError("field 'frames' must be a nonempty list")
    frames: list[FrameEntry] = []
    seen: set[int] = set()
    for pos, fd in enumerate(frames_doc):
        where = f"frames[{pos}]"
        idx = _require(fd, "frame_index", where)
        if idx in seen:
            raise SchemaError(f"{where}: duplicate frame_index {idx}")
        seen.add(idx)
        if not (0 <= idx < frame_count):
            raise SchemaError(f"{where}: frame_index {idx} outside [0, {frame_count})")
        intr = _require(fd, "intrinsics", where)
        for k in ("fx", "fy", "cx", "cy"):
            _require(intr, k, f"{where}.intrinsics")
        pose_doc = _require(fd, "pose", where)
        pose = np.asarray(pose_doc, dtype=np.float64)
        if pose.shape != (3, 4):
            raise SchemaError(f"{where}.pose must be a 3x4 matrix, got shape {pose.shape}")
        _check_rotation(pose[:, :3], idx)
        frames.append(
            FrameEntry(
                frame_index=idx,
                depth_path=root / _require(fd, "depth_path", where),
                fx=float(intr["fx"]),
                fy=float(intr["fy"]),
                cx=float(intr["cx"]),
                cy=float(intr["cy"]),
                pose=pose,
            )
        )
    if seen != set(range(frame_count)):
        raise SchemaError("frame_index values must be dense in [0, frame_count)")

    flows: list[FlowEntry] = []
    for pos, fl in enumerate(doc.get("flows", [])):
        where = f"flows[{pos}]"
        a = _require(fl, "from_index", where)
        b = _require(fl, "to_index", where)
        if a == b:
            raise SchemaError(f"{where}: from_index == to_index ({a})")
        if a not in seen or b not in seen:
            raise SchemaError(f"{where}: flow references unknown frame ({a} -> {b})")
        flows.append(FlowEntry(a, b, root / _require(fl, "flow_path", where)))

    gts: list[GroundTruthEntry] = []
    for pos, gt in enumerate(doc.get("ground_truth", [])):
        where = f"ground_truth[{pos}]"
        idx = _require(gt, "frame_index", where)
        if idx not in seen:
            raise SchemaError(f"{where}: unknown frame_index {idx}")
        disp = gt.get("displacement_path")
        mask = gt.get("mask_path")
        if disp is None and mask is None:
            raise SchemaError(f"{where}: needs displacement_path and/or mask_path")
        gts.append(
            GroundTruthEntry(
                frame_index=idx,
                displacement_path=root / disp if disp else None,
                mask_path=root / mask if mask else None,
            )
        )

    return ClipManifest(
        clip_id=str(clip_id),
        frame_count=frame_count,
        fps=float(fps),
        frames=sorted(frames, key=lambda f: f.frame_index),
        flows=flows,
        ground_truth=gts,
    )


def save_manifest(manifest: ClipManifest, path: str | os.PathLike) -> None:
    """Write a manifest JSON with raster paths relative to its directory."""
    path = Path(path)
    root = path.parent

    def rel(p: Optional[Path]) -> Optional[str]:
        return None if p is None else os.path.relpath(p, root)

    doc = {
        "clip_id": manifest.clip_id,
        "frame_count": manifest.frame_count,
        "fps": manifest.fps,
        "frames": [
            {
                "frame_index": f.frame_index,
                "depth_path": rel(f.depth_path),
                "intrinsics": {"fx": f.fx, "fy": f.fy, "cx": f.cx, "cy": f.cy},
                "pose": f.pose.tolist(),
            }
            for f in manifest.frames
        ],
        "flows": [
            {"from_index": fl.from_index, "to_index": fl.to_index, "flow_path": rel(fl.flow_path)}
            for fl in manifest.flows
        ],
    }
    if manifest.ground_truth:
        doc["ground_truth"] = [
            {
                "frame_index": g.frame_index,
                **({"displacement_path": rel(g.displacement_path)} if g.displacement_path else {}),
                **({"mask_path": rel(g.mask_path)} if g.mask_path else {}),
            }
            for g in manifest.ground_truth
        ]
    write_json_atomic(doc, path)


def write_json_atomic(doc: dict, path: str | os.PathLike) -> None:
    """Write JSON deterministically (sorted keys) via temp file + rename."""
    path = Path(path)
    text = json.dumps(doc, indent=2, sort_keys=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
        fh.write("\n")
    os.replace(tmp, path)


def write_clip_tree(clip, out_dir: str | os.PathLike) -> Path:
    """Materialize an in-memory clip (depths, flows, ground truth) on disk.

    ``clip`` duck-types the MemoryClip interface: ``frame_indices()``,
    ``geometry(i)``, a ``flows`` dict, and optionally a ``ground_truth``
    dict of frame -> (displacement, mask) rasters.  Returns the manifest
    path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = clip.frame_indices()

    frames = []
    for t in indices:
        geom = clip.geometry(t)
        depth_path = out_dir / f"depth_{t:04d}.gcr"
        write_raster(geom.depth, depth_path)
        frames.append(
            FrameEntry(
                frame_index=t,
                depth_path=depth_path,
                fx=geom.intrinsics.fx,
                fy=geom.intrinsics.fy,
                cx=geom.intrinsics.cx,
                cy=geom.intrinsics.cy,
                pose=np.asarray(geom.pose, dtype=np.float64),
            )
        )

    flows = []
    for (a, b) in sorted(clip.flows):
        flow_path = out_dir / f"flow_{a:04d}_{b:04d}.gcr"
        write_raster(clip.flows[(a, b)], flow_path)
        flows.append(FlowEntry(a, b, flow_path))

    gts = []
    for t in sorted(getattr(clip, "ground_truth", {}) or {}):
        disp, mask = clip.ground_truth[t]
        disp_path = mask_path = None
        if disp is not None:
            disp_path = out_dir / f"gt_disp_{t:04d}.gcr"
            write_raster(disp, disp_path)
        if mask is not None:
            mask_path = out_dir / f"gt_mask_{t:04d}.gcr"
            write_raster(mask, mask_path)
        gts.append(GroundTruthEntry(t, disp_path, mask_path))

    manifest = ClipManifest(
        clip_id=clip.clip_id,
        frame_count=len(indices),
        fps=clip.fps,
        frames=frames,
        flows=flows,
        ground_truth=gts,
    )
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path
