"""Procedural rigid scenes with exact depth, poses, and ground-truth flow.

Scenes are built from closed-form primitives (infinite planes, spheres,
axis-aligned boxes) and rendered by analytic ray casting: camera rays are
parameterized so that the ray parameter *is* the camera-space depth, which
makes every rendered depth value exact up to float32 storage.

Ground-truth optical flow between two frames transports each source pixel's
3D point into the target camera and re-projects it.  Occlusion is decided
by casting an exact ray through the projected location in the target view
and comparing the analytic hit depth against the transported depth, so the
visibility mask carries no interpolation error.

Occlusion-inconsistency clips insert an occluder primitive over a frame
interval and reveal a new primitive afterwards, with flows computed against
the scene state of their own frame pair so correspondence genuinely breaks
at the event.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .camera_geometry import EPS_Z, FrameGeometry, Pinhole, camera_rays, pixel_grid, relative_pose
from .consistency_metric import MemoryClip
from .errors import DomainError, SpecError
from .tensor_io import Raster2D

RENDER_TOL = 1e-6  # relative depth tolerance of the exact visibility test
_RAY_EPS = 1e-9


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Plane:
    """Infinite plane n . x = n . anchor."""

    anchor: tuple[float, float, float]
    normal: tuple[float, float, float]

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        offset = float(n @ (np.asarray(self.anchor, dtype=np.float64) - origin))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = offset / denom
        t = np.where(np.abs(denom) > _RAY_EPS, t, np.inf)
        return np.where(t > _RAY_EPS, t, np.inf)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - np.asarray(self.center, dtype=np.float64)
        a = np.einsum("...k,...k->...", dirs, dirs)
        b = 2.0 * (dirs @ oc)
        c = float(oc @ oc) - self.radius**2
        disc = b * b - 4.0 * a * c
        hit = disc >= 0.0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t_near = (-b - sq) / (2.0 * a)
        t_far = (-b + sq) / (2.0 * a)
        t = np.where(t_near > _RAY_EPS, t_near, t_far)
        return np.where(hit & (t > _RAY_EPS), t, np.inf)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lo, hi]."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        t_enter = np.full(dirs.shape[:-1], -np.inf)
        t_exit = np.full(dirs.shape[:-1], np.inf)
        for axis in range(3):
            d = dirs[..., axis]
            o = origin[axis]
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo[axis] - o) / d
                t2 = (hi[axis] - o) / d
            near = np.minimum(t1, t2)
            far = np.maximum(t1, t2)
            parallel = np.abs(d) <= _RAY_EPS
            inside_slab = (o >= lo[axis]) & (o <= hi[axis])
            near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), near)
            far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), far)
            t_enter = np.maximum(t_enter, near)
            t_exit = np.minimum(t_exit, far)
        hit = (t_exit >= t_enter) & (t_exit > _RAY_EPS)
        t = np.where(t_enter > _RAY_EPS, t_enter, t_exit)
        return np.where(hit & (t > _RAY_EPS), t, np.inf)


Primitive = Plane | Sphere | Box


def _nearest_hit(primitives: Sequence[Primitive], origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    best = np.full(dirs.shape[:-1], np.inf)
    for prim in primitives:
        best = np.minimum(best, prim.intersect(origin, dirs))
    return best


# --------------------------------------------------------------------------
# Cameras
# --------------------------------------------------------------------------


def look_at_pose(position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera 3x4 with camera +z toward ``target``."""
    pos = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise DomainError("camera position and look-at target coincide")
    fwd = fwd / norm
    upv = np.asarray(up, dtype=np.float64)
    x = np.cross(upv, fwd)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross((1.0, 0.0, 0.0), fwd)
    x = x / np.linalg.norm(x)
    y = np.cross(fwd, x)
    pose = np.empty((3, 4), dtype=np.float64)
    pose[:, 0] = x
    pose[:, 1] = y
    pose[:, 2] = fwd
    pose[:, 3] = pos
    return pose


def orbit_track(center, radius: float, n: int, degrees_per_frame: float, start_deg: float = 0.0,
                height: float = 0.0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Camera circling ``center`` in the xz-plane, always looking at it."""
    c = np.asarray(center, dtype=np.float64)
    out = []
    for t in range(n):
        a = math.radians(start_deg + degrees_per_frame * t)
        pos = c + np.array([radius * math.sin(a), height, -radius * math.cos(a)])
        out.append((pos, c.copy()))
    return out


def dolly_track(start, target, n: int, speed_per_frame: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Camera pushing along its view axis toward a fixed target."""
    pos0 = np.asarray(start, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    fwd = (tgt - pos0) / np.linalg.norm(tgt - pos0)
    return [(pos0 + fwd * speed_per_frame * t, tgt.copy()) for t in range(n)]


def lateral_track(start, target, n: int, speed_per_frame: float, axis=(1.0, 0.0, 0.0)) -> list[tuple[np.ndarray, np.ndarray]]:
    """Camera sliding sideways with a fixed view direction."""
    pos0 = np.asarray(start, dtype=np.float64)
    tgt0 = np.asarray(target, dtype=np.float64)
    ax = np.asarray(axis, dtype=np.float64)
    return [(pos0 + ax * speed_per_frame * t, tgt0 + ax * speed_per_frame * t) for t in range(n)]


# --------------------------------------------------------------------------
# Scene spec and rendering
# --------------------------------------------------------------------------


@dataclass
class SceneSpec:
    primitives: list[Primitive]
    track: list[tuple[np.ndarray, np.ndarray]]  # (position, look_at) per frame
    intrinsics: Pinhole
    width: int
    height: int
    fps: float = 8.0

    @property
    def frame_count(self) -> int:
        return len(self.track)

    def pose(self, t: int) -> np.ndarray:
        pos, tgt = self.track[t]
        return look_at_pose(pos, tgt)


@dataclass
class OcclusionEvent:
    """An occluder active over [occlude_start, reveal_frame) and a primitive
    revealed from ``reveal_frame`` on, in a region occluded throughout."""

    occluder: Optional[Primitive] = None
    occlude_start: int = 0
    reveal_frame: int = 0
    revealed: Optional[Primitive] = None

    def primitives_at(self, base: Sequence[Primitive], t: int) -> list[Primitive]:
        prims = list(base)
        if self.occluder is not None and self.occlude_start <= t < self.reveal_frame:
            prims.append(self.occluder)
        if self.revealed is not None and t >= self.reveal_frame:
            prims.append(self.revealed)
        return prims


def _render_arrays(spec: SceneSpec, t: int, primitives: Sequence[Primitive]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic depth (float64), hit mask, and the world-from-camera pose."""
    pose = spec.pose(t)
    rays = camera_rays(spec.width, spec.height, spec.intrinsics)
    dirs = rays @ pose[:, :3].T
    ts = _nearest_hit(primitives, pose[:, 3], dirs)
    hit = np.isfinite(ts)
    return ts, hit, pose


def render_depth(spec: SceneSpec, t: int, primitives: Optional[Sequence[Primitive]] = None) -> FrameGeometry:
    """Exact analytic depth of frame ``t`` (nearest primitive hit per pixel)."""
    if not (0 <= t < spec.frame_count):
        raise DomainError(f"frame index {t} outside [0, {spec.frame_count})")
    prims = spec.primitives if primitives is None else primitives
    ts, hit, pose = _render_arrays(spec, t, prims)
    if not hit.any():
        raise SpecError(f"frame {t} sees no primitive")
    depth = np.where(hit, ts, 1.0).astype(np.float32)
    return FrameGeometry(depth=Raster2D(data=depth, mask=hit), intrinsics=spec.intrinsics, pose=pose)


def ground_truth_flow(
    spec: SceneSpec,
    t_from: int,
    t_to: int,
    prims_from: Optional[Sequence[Primitive]] = None,
    prims_to: Optional[Sequence[Primitive]] = None,
    geom_from: Optional[FrameGeometry] = None,
) -> Raster2D:
    """Exact flow t_from -> t_to with an analytic visibility mask.

    Source points are taken from the stored (float32) depth raster so the
    flow agrees bit-for-bit in inputs with what a rigid-flow computation on
    the same raster sees.  A pixel is masked invalid when its point projects
    outside the target image or is occluded in the target scene state.
    """
    prims_from = spec.primitives if prims_from is None else prims_from
    prims_to = spec.primitives if prims_to is None else prims_to
    if geom_from is None:
        geom_from = render_depth(spec, t_from, prims_from)
    pose_from = geom_from.pose
    pose_to = spec.pose(t_to)
    k = spec.intrinsics

    # transport through the relative pose with the same arithmetic the
    # rigid-flow path uses, so the two agree bit-for-bit on shared inputs;
    # this oracle's independence lies in the ray-cast depth and the exact
    # scene-based visibility test below
    rel = relative_pose(pose_from, pose_to)
    rays = camera_rays(spec.width, spec.height, k)
    g = rays @ rel.rotation.T
    z = geom_from.depth.plane().astype(np.float64)
    hit = geom_from.depth.valid_mask()
    cam2 = g * z[:, :, None] + rel.translation[None, None, :]
    z2 = cam2[:, :, 2]
    front = hit & (z2 > EPS_Z)
    z2s = np.where(front, z2, 1.0)
    u2 = k.fx * cam2[:, :, 0] / z2s + k.cx
    v2 = k.fy * cam2[:, :, 1] / z2s + k.cy
    inside = front & (u2 >= 0) & (u2 <= spec.width - 1) & (v2 >= 0) & (v2 <= spec.height - 1)

    # exact occlusion: cast the target-camera ray through (u2, v2)
    rays2 = np.stack([(u2 - k.cx) / k.fx, (v2 - k.cy) / k.fy, np.ones_like(u2)], axis=-1)
    dirs2_w = rays2 @ pose_to[:, :3].T
    t_star = _nearest_hit(prims_to, pose_to[:, 3], dirs2_w)
    visible = inside & np.isfinite(t_star) & (np.abs(t_star - z2) <= RENDER_TOL * z2s)

    uu, vv = pixel_grid(spec.width, spec.height)
    flow = np.zeros((spec.height, spec.width, 2), dtype=np.float64)
    flow[:, :, 0] = np.where(visible, u2 - uu, 0.0)
    flow[:, :, 1] = np.where(visible, v2 - vv, 0.0)
    return Raster2D(data=flow.astype(np.float32), mask=visible)


# --------------------------------------------------------------------------
# Clip generation
# --------------------------------------------------------------------------


def default_flow_offsets(window: int = 5) -> tuple[int, ...]:
    half = (window - 1) // 2
    return tuple(k for k in range(-half, half + 1) if k != 0)


def generate_rigid_clip(
    spec: SceneSpec,
    clip_id: str = "rigid",
    flow_offsets: Sequence[int] = (-2, -1, 1, 2),
) -> MemoryClip:
    """Render a static scene along the camera track, with GT flows for the
    requested frame-index offsets."""
    geoms = {t: render_depth(spec, t) for t in range(spec.frame_count)}
    flows: dict[tuple[int, int], Raster2D] = {}
    for c in range(spec.frame_count):
        for k in flow_offsets:
            i = c + k
            if 0 <= i < spec.frame_count and (c, i) not in flows:
                flows[(c, i)] = ground_truth_flow(spec, c, i, geom_from=geoms[c])
    return MemoryClip(clip_id=clip_id, fps=spec.fps, geometries=geoms, flows=flows)


def generate_occlusion_clip(
    spec: SceneSpec,
    event: OcclusionEvent,
    clip_id: str = "occlusion",
    flow_offsets: Sequence[int] = (-2, -1, 1, 2),
) -> tuple[MemoryClip, Optional[np.ndarray]]:
    """Clip with a sudden-appearance event; returns (clip, artifact_mask).

    The artifact mask marks pixels of the reveal frame where the new
    primitive is the nearest visible surface; it is None for a null event.
    Flows use the scene state of their own frame pair, so correspondence
    into the changed region is genuinely broken (masked invalid).
    """
    if event.revealed is not None:
        if not (0 < event.reveal_frame < spec.frame_count):
            raise SpecError(f"reveal_frame {event.reveal_frame} outside (0, {spec.frame_count})")
        if event.occlude_start >= event.reveal_frame:
            raise SpecError("occlusion interval is empty: occlude_start >= reveal_frame")
        for t in range(event.occlude_start, event.reveal_frame):
            prims = event.primitives_at(spec.primitives, t) + [event.revealed]
            ts_new = _visible_pixels(spec, t, prims, event.revealed)
            if ts_new.any():
                raise SpecError(f"changed region not fully occluded at frame {t}")
        probe = max(event.occlude_start - 1, 0)
        if event.occlude_start > 0:
            prims = event.primitives_at(spec.primitives, probe) + [event.revealed]
            if not _visible_pixels(spec, probe, prims, event.revealed).any():
                raise SpecError(f"changed region not visible at frame {probe} before occlusion")

    geoms: dict[int, FrameGeometry] = {}
    per_frame_prims: dict[int, list[Primitive]] = {}
    for t in range(spec.frame_count):
        prims = event.primitives_at(spec.primitives, t)
        per_frame_prims[t] = prims
        geoms[t] = render_depth(spec, t, prims)

    flows: dict[tuple[int, int], Raster2D] = {}
    for c in range(spec.frame_count):
        for k in flow_offsets:
            i = c + k
            if 0 <= i < spec.frame_count and (c, i) not in flows:
                flows[(c, i)] = ground_truth_flow(
                    spec, c, i, per_frame_prims[c], per_frame_prims[i], geom_from=geoms[c]
                )

    artifact = None
    clip = MemoryClip(clip_id=clip_id, fps=spec.fps, geometries=geoms, flows=flows)
    if event.revealed is not None:
        artifact = _visible_pixels(
            spec, event.reveal_frame, per_frame_prims[event.reveal_frame], event.revealed
        )
        if not artifact.any():
            raise SpecError(f"revealed primitive not visible at frame {event.reveal_frame}")
        mask_raster = Raster2D(data=artifact.astype(np.float32), mask=None)
        clip.ground_truth = {event.reveal_frame: (None, mask_raster)}
    return clip, artifact


def _visible_pixels(spec: SceneSpec, t: int, primitives: Sequence[Primitive], target: Primitive) -> np.ndarray:
    """Pixels of frame t whose nearest hit among ``primitives`` is ``target``."""
    pose = spec.pose(t)
    rays = camera_rays(spec.width, spec.height, spec.intrinsics)
    dirs = rays @ pose[:, :3].T
    t_target = target.intersect(pose[:, 3], dirs)
    others = [p for p in primitives if p is not target]
    t_rest = _nearest_hit(others, pose[:, 3], dirs) if others else np.full(dirs.shape[:-1], np.inf)
    return np.isfinite(t_target) & (t_target < t_rest)


# --------------------------------------------------------------------------
# Seeded scene presets for benchmark generation
# --------------------------------------------------------------------------

TRACK_KINDS = ("orbit", "dolly", "lateral")


def preset_scene(
    kind: str,
    width: int,
    height: int,
    frame_count: int,
    fps: float,
    rng: np.random.Generator,
    speed: float = 1.0,
) -> SceneSpec:
    """A jittered indoor-style scene with the requested camera track.

    The scene is enclosed by a large sphere so every pixel has valid depth:
    a floor plane, a center sphere, and a box provide parallax and
    silhouettes.  ``speed`` scales the camera motion per frame.
    """
    if kind not in TRACK_KINDS:
        raise DomainError(f"unknown track kind '{kind}', expected one of {TRACK_KINDS}")
    focal = 0.9 * width * (1.0 + 0.1 * (rng.random() - 0.5))
    intr = Pinhole(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0)

    center = np.array([0.0, 0.0, 4.0]) + 0.2 * (rng.random(3) - 0.5)
    sphere = Sphere(center=tuple(center + 0.15 * (rng.random(3) - 0.5)), radius=0.7 + 0.2 * rng.random())
    box_lo = center + np.array([-1.6, 0.2, 0.6]) + 0.1 * (rng.random(3) - 0.5)
    box = Box(lo=tuple(box_lo), hi=tuple(box_lo + np.array([0.8, 0.8, 0.8])))
    floor = Plane(anchor=(0.0, -1.6 - 0.2 * rng.random(), 0.0), normal=(0.0, 1.0, 0.0))
    enclosure = Sphere(center=tuple(center), radius=28.0 + 4.0 * rng.random())
    primitives: list[Primitive] = [enclosure, floor, sphere, box]

    if kind == "orbit":
        track = orbit_track(
            center,
            radius=3.5 + 0.5 * rng.random(),
            n=frame_count,
            degrees_per_frame=(1.5 + rng.random()) * speed,
            start_deg=float(rng.uniform(-20, 20)),
            height=float(rng.uniform(-0.3, 0.3)),
        )
    elif kind == "dolly":
        start = center + np.array([0.0, 0.0, -4.0]) + 0.2 * (rng.random(3) - 0.5)
        track = dolly_track(start, center, n=frame_count, speed_per_frame=0.04 * speed)
    else:
        start = center + np.array([-0.6, 0.0, -4.0])
        track = lateral_track(start, center + np.array([-0.6, 0.0, 0.0]), n=frame_count,
                              speed_per_frame=0.05 * speed)
    return SceneSpec(
        primitives=primitives, track=track, intrinsics=intr, width=width, height=height, fps=fps
    )


def preset_relief_scene(
    kind: str,
    width: int,
    height: int,
    frame_count: int,
    fps: float,
    rng: np.random.Generator,
) -> SceneSpec:
    """Shallow-relief scene for exactness testing: objects sit close to a
    backdrop plane, keeping disocclusion strips under two pixels for the
    preset camera speeds, and no grazing surfaces inflate interpolation
    error.  Depth discontinuities exist only at object silhouettes.
    """
    if kind not in TRACK_KINDS:
        raise DomainError(f"unknown track kind '{kind}', expected one of {TRACK_KINDS}")
    focal = 0.9 * width * (1.0 + 0.1 * (rng.random() - 0.5))
    intr = Pinhole(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0)

    backdrop = Plane(anchor=(0.0, 0.0, 6.0), normal=(0.0, 0.0, 1.0))
    sphere = Sphere(
        center=(0.3 * (rng.random() - 0.5), 0.3 * (rng.random() - 0.5), 4.8 + 0.2 * rng.random()),
        radius=0.6 + 0.15 * rng.random(),
    )
    lo = np.array([-1.7, 0.3, 5.0]) + 0.1 * (rng.random(3) - 0.5)
    box = Box(lo=tuple(lo), hi=tuple(lo + np.array([0.9, 0.9, 0.7])))
    primitives: list[Primitive] = [backdrop, sphere, box]
    center = np.array([0.0, 0.0, 4.8])

    if kind == "orbit":
        track = orbit_track(center, radius=4.6, n=frame_count,
                            degrees_per_frame=0.45 + 0.1 * rng.random(),
                            start_deg=float(rng.uniform(-5, 5)))
    elif kind == "dolly":
        start = center + np.array([0.0, 0.0, -4.6])
        track = dolly_track(start, center, n=frame_count,
                            speed_per_frame=0.035 + 0.01 * rng.random())
    else:
        start = np.array([-0.4, 0.0, 0.0])
        track = lateral_track(start, start + np.array([0.0, 0.0, 6.0]), n=frame_count,
                              speed_per_frame=0.03 + 0.01 * rng.random())
    return SceneSpec(
        primitives=primitives, track=track, intrinsics=intr, width=width, height=height, fps=fps
    )


def preset_warp_scene(
    width: int,
    height: int,
    frame_count: int,
    fps: float,
    rng: np.random.Generator,
    speed: float = 1.0,
) -> SceneSpec:
    """Fronto-parallel backdrop under a lateral track, for deformation clips.

    The backdrop keeps camera-space depth constant across the image, so an
    in-plane warp of the depth raster is a no-op and the injected
    deformation is visible to the motion cue alone; side content sits
    outside the central deformation region.
    """
    focal = 0.9 * width * (1.0 + 0.15 * (rng.random() - 0.5))
    intr = Pinhole(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0)
    z_back = 6.0 + 4.0 * rng.random()
    backdrop = Plane(anchor=(0.0, 0.0, z_back), normal=(0.0, 0.0, 1.0))
    track = lateral_track(
        start=(-0.3, 0.0, 0.0),
        target=(-0.3, 0.0, z_back),
        n=frame_count,
        speed_per_frame=(0.04 + 0.03 * rng.random()) * speed,
    )
    return SceneSpec(
        primitives=[backdrop], track=track, intrinsics=intr, width=width, height=height, fps=fps
    )


def preset_occlusion(
    width: int,
    height: int,
    frame_count: int,
    fps: float,
    rng: np.random.Generator,
    occluded_frames: int = 1,
    reveal_frame: Optional[int] = None,
    speed: float = 1.0,
) -> tuple[SceneSpec, OcclusionEvent]:
    """A lateral-track scene staging a sudden-appearance event.

    A fronto-parallel backdrop keeps every ray covered (and free of benign
    disocclusion bands); a hovering box hides the target region for
    ``occluded_frames`` frames, after which a sphere appears there.  Keeping
    the occluded span shorter than the sliding-window reach lets the
    reveal frame be compared against a pre-occlusion view of the empty
    region, which is what pins the inconsistency to the revealed object.
    """
    if reveal_frame is None:
        reveal_frame = frame_count - 6
    occlude_start = reveal_frame - occluded_frames
    focal = 0.9 * width * (1.0 + 0.08 * (rng.random() - 0.5))
    intr = Pinhole(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0)

    backdrop = Plane(anchor=(0.0, 0.0, 8.0), normal=(0.0, 0.0, 1.0))
    primitives: list[Primitive] = [backdrop]

    track = lateral_track(
        start=(-0.2, 0.0, 0.0),
        target=(-0.2, 0.0, 8.0),
        n=frame_count,
        speed_per_frame=0.06 * speed,
    )
    revealed = Sphere(
        center=(0.55 + 0.1 * rng.random(), 0.05 * rng.random(), 7.1), radius=0.45 + 0.05 * rng.random()
    )
    occluder = Box(lo=(-0.6, -0.9, 3.8), hi=(1.8, 0.9, 4.4))
    event = OcclusionEvent(
        occluder=occluder,
        occlude_start=occlude_start,
        reveal_frame=reveal_frame,
        revealed=revealed,
    )
    spec = SceneSpec(
        primitives=primitives, track=track, intrinsics=intr, width=width, height=height, fps=fps
    )
    return spec, event
