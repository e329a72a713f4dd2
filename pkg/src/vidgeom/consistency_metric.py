"""Dense geometric-consistency maps and their temporal aggregation.

For one ordered frame pair (c, i) three per-pixel quantities are computed:

* motion residual: measured optical flow minus the rigid flow the camera
  motion alone would induce, normalized by focal length into a
  dimensionless magnitude m = sqrt((du/fx)^2 + (dv/fy)^2);
* structure residual: s = |d_hat_i - z_proj| / z_c, where z_proj is the
  depth of the pixel's point transported into frame i and d_hat_i the
  bilinearly sampled depth frame i actually predicts there;
* fused map: sqrt((cov * m)^2 + s^2) with cov the bidirectional
  co-visibility mask, so the structure term alone drives occluded regions.

Both residuals are dimensionless, which makes every map invariant to a
global rescaling of depths and translations.

Frame-level maps average the pairwise maps inside a sliding window around
a center frame; video-level scalars average frame means over evaluation
windows, frame-weighted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .camera_geometry import (
    DEFAULT_TAU,
    FrameGeometry,
    Pinhole,
    RelativePose,
    check_resolution,
    covisibility_masks,
    forward_visibility,
    project_depth,
    relative_pose,
    rigid_flow,
)
from .errors import DomainError, MissingInputError
from .tensor_io import ClipManifest, Raster2D, load_manifest, read_raster

DEFAULT_WINDOW = 5
DEFAULT_EVAL_FPS = 8.0
DEFAULT_WINDOW_SECONDS = 3.0
DEFAULT_OVERLAP = 0.5


@dataclass
class PairMaps:
    """Per-pixel consistency maps for one frame pair (or a window aggregate).

    ``motion`` is valid only on co-visible pixels with usable flow;
    ``structure`` and ``fused`` are valid wherever the source pixel's
    projection lands inside the target frame (struct_valid), which is a
    superset of the co-visible region.
    """

    motion: Raster2D
    structure: Raster2D
    fused: Raster2D
    covis: np.ndarray  # (H, W) bool
    struct_valid: np.ndarray  # (H, W) bool


@dataclass
class FrameScore:
    center_index: int
    motion_mean: float
    structure_mean: float
    fused_mean: float
    valid_pixel_fraction: float

    def to_json(self) -> dict:
        return {
            "center_index": self.center_index,
            "motion_mean": self.motion_mean,
            "structure_mean": self.structure_mean,
            "fused_mean": self.fused_mean,
            "valid_pixel_fraction": self.valid_pixel_fraction,
        }


@dataclass
class VideoScore:
    motion: float
    structure: float
    fused: float
    per_frame: list[FrameScore] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "motion": self.motion,
            "structure": self.structure,
            "fused": self.fused,
            "per_frame": [f.to_json() for f in self.per_frame],
        }


# --------------------------------------------------------------------------
# Clip access: raster-backed and in-memory variants share one interface
# --------------------------------------------------------------------------


class ClipData:
    """Lazy raster loader over a :class:`ClipManifest`, with caching."""

    def __init__(self, manifest: ClipManifest):
        self.manifest = manifest
        self._geom: dict[int, FrameGeometry] = {}
        self._flow: dict[tuple[int, int], Raster2D] = {}

    @classmethod
    def from_path(cls, path) -> "ClipData":
        return cls(load_manifest(path))

    @property
    def fps(self) -> float:
        return self.manifest.fps

    @property
    def clip_id(self) -> str:
        return self.manifest.clip_id

    def frame_indices(self) -> list[int]:
        return [f.frame_index for f in self.manifest.frames]

    def geometry(self, index: int) -> FrameGeometry:
        if index not in self._geom:
            entry = self.manifest.frame(index)
            self._geom[index] = FrameGeometry(
                depth=read_raster(entry.depth_path),
                intrinsics=Pinhole(entry.fx, entry.fy, entry.cx, entry.cy),
                pose=entry.pose,
            )
        return self._geom[index]

    def has_flow(self, from_index: int, to_index: int) -> bool:
        return self.manifest.flow_entry(from_index, to_index) is not None

    def flow(self, from_index: int, to_index: int) -> Raster2D:
        key = (from_index, to_index)
        if key not in self._flow:
            entry = self.manifest.flow_entry(from_index, to_index)
            if entry is None:
                raise MissingInputError(f"no flow for frame pair {from_index} -> {to_index}")
            self._flow[key] = read_raster(entry.flow_path)
        return self._flow[key]

    def pose_between(self, from_index: int, to_index: int) -> RelativePose:
        return relative_pose(
            self.manifest.frame(from_index).pose, self.manifest.frame(to_index).pose
        )


@dataclass
class MemoryClip:
    """In-memory clip for tests and generators; mirrors :class:`ClipData`.

    ``ground_truth`` maps a frame index to (displacement, mask) rasters,
    either of which may be None.
    """

    clip_id: str
    fps: float
    geometries: dict[int, FrameGeometry]
    flows: dict[tuple[int, int], Raster2D]
    ground_truth: dict[int, tuple[Optional[Raster2D], Optional[Raster2D]]] = field(
        default_factory=dict
    )

    def frame_indices(self) -> list[int]:
        return sorted(self.geometries)

    def geometry(self, index: int) -> FrameGeometry:
        return self.geometries[index]

    def has_flow(self, from_index: int, to_index: int) -> bool:
        return (from_index, to_index) in self.flows

    def flow(self, from_index: int, to_index: int) -> Raster2D:
        try:
            return self.flows[(from_index, to_index)]
        except KeyError:
            raise MissingInputError(f"no flow for frame pair {from_index} -> {to_index}") from None

    def pose_between(self, from_index: int, to_index: int) -> RelativePose:
        return relative_pose(self.geometries[from_index].pose, self.geometries[to_index].pose)


# --------------------------------------------------------------------------
# Pair-level operations
# --------------------------------------------------------------------------


def residual_motion(
    flow: Raster2D,
    geom_c: FrameGeometry,
    pose_c_to_i: RelativePose,
    k_i: Pinhole,
) -> Raster2D:
    """Measured flow minus camera-induced rigid flow, per pixel (2-channel)."""
    check_resolution(flow, geom_c.depth)
    rigid = rigid_flow(geom_c, pose_c_to_i, k_i)
    ok = flow.valid_mask() & rigid.valid_mask()
    res = flow.data.astype(np.float64) - rigid.data.astype(np.float64)
    res[~ok] = 0.0
    return Raster2D(data=res.astype(np.float32), mask=ok)


def structure_residual(
    geom_c: FrameGeometry,
    geom_i: FrameGeometry,
    pose_c_to_i: RelativePose,
) -> Raster2D:
    """Normalized depth discrepancy |d_hat_i - z_proj| / z_c per source pixel.

    Invalid only where the source depth is missing or the projection leaves
    the target image; occluded-but-projectable pixels keep their value,
    which is what lets this cue flag content that appears or vanishes.
    """
    proj = project_depth(geom_c, geom_i, pose_c_to_i)
    z_c = np.where(proj.valid, proj.z_src, 1.0)
    s = np.where(proj.valid, np.abs(proj.d_hat - proj.z_proj) / z_c, 0.0)
    return Raster2D(data=s.astype(np.float32), mask=proj.valid)


def normalize_and_fuse(
    residual: Raster2D,
    struct_res: Raster2D,
    covis: np.ndarray,
    k_i: Pinhole,
) -> PairMaps:
    """Focal-normalize the flow residual and fuse it with the structure cue.

    m = sqrt((du/fx)^2 + (dv/fy)^2); fused = sqrt((cov*m)^2 + s^2) with the
    motion term zeroed outside the co-visibility mask (or where flow is
    unavailable), so occluded regions are driven by structure alone.
    """
    check_resolution(residual, struct_res)
    if residual.data.shape[:2] != covis.shape:
        raise DomainError("covisibility mask resolution does not match the residual raster")
    du = residual.data[:, :, 0].astype(np.float64)
    dv = residual.data[:, :, 1].astype(np.float64)
    m = np.sqrt((du / k_i.fx) ** 2 + (dv / k_i.fy) ** 2)

    m_ok = residual.valid_mask() & covis
    s_ok = struct_res.valid_mask()
    s = struct_res.plane().astype(np.float64)

    m_eff = np.where(m_ok, m, 0.0)
    fused = np.where(s_ok, np.sqrt(m_eff**2 + np.where(s_ok, s, 0.0) ** 2), 0.0)

    return PairMaps(
        motion=Raster2D(data=np.where(m_ok, m, 0.0).astype(np.float32), mask=m_ok),
        structure=struct_res,
        fused=Raster2D(data=fused.astype(np.float32), mask=s_ok),
        covis=covis.copy(),
        struct_valid=s_ok.copy(),
    )


def compute_pair_maps(
    geom_c: FrameGeometry,
    geom_i: FrameGeometry,
    pose_c_to_i: RelativePose,
    flow_c_to_i: Raster2D,
    tau: float = DEFAULT_TAU,
) -> PairMaps:
    """Full per-pair pipeline: residual motion, structure, co-visibility, fusion."""
    covis, proj = covisibility_masks(geom_c, geom_i, pose_c_to_i, tau)
    z_c = np.where(proj.valid, proj.z_src, 1.0)
    s = np.where(proj.valid, np.abs(proj.d_hat - proj.z_proj) / z_c, 0.0)
    struct = Raster2D(data=s.astype(np.float32), mask=proj.valid)
    residual = residual_motion(flow_c_to_i, geom_c, pose_c_to_i, geom_i.intrinsics)
    return normalize_and_fuse(residual, struct, covis, geom_i.intrinsics)


# --------------------------------------------------------------------------
# Temporal aggregation
# --------------------------------------------------------------------------


def _window_partners(seq: Sequence[int], center: int, window: int) -> list[int]:
    if window < 3 or window % 2 == 0:
        raise DomainError(f"window must be an odd count >= 3, got {window}")
    pos = list(seq).index(center)
    half = (window - 1) // 2
    lo = max(0, pos - half)
    hi = min(len(seq), pos + half + 1)
    return [seq[j] for j in range(lo, hi) if j != pos]


def score_window(
    clip,
    center: int,
    window: int = DEFAULT_WINDOW,
    tau: float = DEFAULT_TAU,
    frame_indices: Optional[Sequence[int]] = None,
) -> tuple[FrameScore, PairMaps]:
    """Score one center frame against its sliding-window partners.

    Pairwise maps are averaged per pixel over the pairs where the pixel is
    valid (count-normalized); frame means are taken over pixels valid in at
    least one pair.  The window truncates at sequence boundaries.
    """
    seq = list(frame_indices) if frame_indices is not None else clip.frame_indices()
    partners = _window_partners(seq, center, window)
    if not partners:
        raise DomainError(f"frame {center} has no window partners in a sequence of {len(seq)}")

    geom_c = clip.geometry(center)
    h, w = geom_c.height, geom_c.width
    sums = {k: np.zeros((h, w), dtype=np.float64) for k in ("motion", "structure", "fused")}
    counts = {k: np.zeros((h, w), dtype=np.int64) for k in ("motion", "structure", "fused")}
    covis_any = np.zeros((h, w), dtype=bool)
    valid_any = np.zeros((h, w), dtype=bool)

    for i in partners:
        if not clip.has_flow(center, i):
            raise MissingInputError(f"no flow for frame pair {center} -> {i}")
        maps = compute_pair_maps(
            geom_c, clip.geometry(i), clip.pose_between(center, i), clip.flow(center, i), tau
        )
        for key, raster in (("motion", maps.motion), ("structure", maps.structure), ("fused", maps.fused)):
            ok = raster.valid_mask()
            sums[key][ok] += raster.plane().astype(np.float64)[ok]
            counts[key][ok] += 1
        covis_any |= maps.covis
        valid_any |= maps.struct_valid

    agg = {}
    means = {}
    for key in sums:
        cnt = counts[key]
        ok = cnt > 0
        vals = np.where(ok, sums[key] / np.maximum(cnt, 1), 0.0)
        agg[key] = Raster2D(data=vals.astype(np.float32), mask=ok)
        means[key] = float(vals[ok].mean()) if ok.any() else 0.0

    fused_ok = counts["fused"] > 0
    score = FrameScore(
        center_index=center,
        motion_mean=means["motion"],
        structure_mean=means["structure"],
        fused_mean=means["fused"],
        valid_pixel_fraction=float(fused_ok.mean()),
    )
    maps = PairMaps(
        motion=agg["motion"],
        structure=agg["structure"],
        fused=agg["fused"],
        covis=covis_any,
        struct_valid=valid_any,
    )
    return score, maps


def decimate_indices(frame_indices: Sequence[int], fps: float, eval_fps: float) -> list[int]:
    """Nearest-index decimation of a frame sequence to at most ``eval_fps``."""
    seq = list(frame_indices)
    if fps <= eval_fps:
        return seq
    out: list[int] = []
    k = 0
    while True:
        pos = int(math.floor(k * fps / eval_fps + 0.5))
        if pos >= len(seq):
            break
        if not out or seq[pos] != out[-1]:
            out.append(seq[pos])
        k += 1
    return out


def partition_windows(n_frames: int, frames_per_window: int, overlap: float) -> list[tuple[int, int]]:
    """Overlapping [start, end) spans covering a sequence of ``n_frames``."""
    length = min(frames_per_window, n_frames)
    stride = max(1, int(round(length * (1.0 - overlap))))
    starts = list(range(0, max(1, n_frames - length + 1), stride))
    if starts[-1] + length < n_frames:
        starts.append(n_frames - length)
    return [(s, s + length) for s in starts]


def score_clip(
    clip,
    window: int = DEFAULT_WINDOW,
    tau: float = DEFAULT_TAU,
    eval_fps: float = DEFAULT_EVAL_FPS,
    window_seconds: float = DEFAULT_WINDOW_SECONDS,
    overlap: float = DEFAULT_OVERLAP,
    jobs: int = 1,
) -> VideoScore:
    """Video-level scalars over overlapping evaluation windows.

    Frames are decimated to at most ``eval_fps``, grouped into windows of
    ``window_seconds`` with the given overlap, and every frame of every
    window is scored as a center (sliding windows truncate at the window
    edges).  Clip scalars are the frame-weighted average over windows; a
    frame covered by two windows contributes to both.
    """
    seq = decimate_indices(clip.frame_indices(), clip.fps, eval_fps)
    frames_per_window = max(2, int(round(window_seconds * min(clip.fps, eval_fps))))
    spans = partition_windows(len(seq), frames_per_window, overlap)

    tasks = []
    for start, end in spans:
        span_seq = seq[start:end]
        for center in span_seq:
            tasks.append((center, tuple(span_seq)))

    def run(task):
        center, span_seq = task
        score, _ = score_window(clip, center, window=window, tau=tau, frame_indices=span_seq)
        return score

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_frame = list(pool.map(run, tasks))
    else:
        per_frame = [run(t) for t in tasks]

    scored = [f for f in per_frame if f.valid_pixel_fraction > 0]
    if scored:
        motion = float(np.mean([f.motion_mean for f in scored]))
        structure = float(np.mean([f.structure_mean for f in scored]))
        fused = float(np.mean([f.fused_mean for f in scored]))
    else:
        motion = structure = fused = 0.0
    return VideoScore(motion=motion, structure=structure, fused=fused, per_frame=per_frame)


def frame_level_scores(
    clip,
    window: int = DEFAULT_WINDOW,
    tau: float = DEFAULT_TAU,
    eval_fps: float = DEFAULT_EVAL_FPS,
    jobs: int = 1,
    keep_maps: bool = False,
) -> list[tuple[FrameScore, Optional[PairMaps]]]:
    """One score (and optionally the aggregated maps) per decimated frame.

    Unlike :func:`score_clip`, sliding windows here span the whole decimated
    sequence, giving exactly one entry per frame; this is the per-frame
    anomaly signal and the source of emitted heatmaps.
    """
    seq = decimate_indices(clip.frame_indices(), clip.fps, eval_fps)

    def run(center):
        score, maps = score_window(clip, center, window=window, tau=tau, frame_indices=seq)
        return score, (maps if keep_maps else None)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, seq))
    return [run(c) for c in seq]
