"""Pinhole projection machinery.

Conventions used throughout the package:

* Pixel p = (u, v) with u along width and v along height; pixel centers sit
  at integer coordinates, so the image domain is [0, W-1] x [0, H-1].
* Camera space is right-handed with +z in front of the camera; valid depths
  are strictly positive.
* Poses in manifests are world-from-camera: X_world = R @ X_cam + t.
* A relative pose c->i maps camera-c coordinates into camera-i coordinates:
  X_i = R_rel @ X_c + T_rel with R_rel = R_i^T R_c and T_rel = R_i^T (t_c - t_i).

Back-projection of pixel p at depth z is z * K^{-1} p_tilde, i.e.
((u-cx)/fx * z, (v-cy)/fy * z, z); projection is the inverse.  The rigid
flow induced by camera motion over a static scene is the projection of the
transformed back-projection minus the source pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BehindCameraError, DomainError, ShapeError, ValidationError
from .tensor_io import Raster2D

EPS_Z = 1e-6  # behind-camera cutoff, in scene units
DEFAULT_TAU = 0.02  # relative depth threshold of the bidirectional visibility check


@dataclass(frozen=True)
class Pinhole:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def scaled(self, sx: float, sy: float) -> "Pinhole":
        """Intrinsics after multiplying image width by sx and height by sy."""
        return Pinhole(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)


@dataclass(frozen=True)
class RelativePose:
    """Rotation + translation mapping source-camera points into the target camera."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValidationError(f"rotation must be 3x3, got {rot.shape}")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValidationError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValidationError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    def inverse(self) -> "RelativePose":
        return RelativePose(self.rotation.T, -self.rotation.T @ self.translation)

    @staticmethod
    def identity() -> "RelativePose":
        return RelativePose(np.eye(3), np.zeros(3))


def relative_pose(pose_src: np.ndarray, pose_dst: np.ndarray) -> RelativePose:
    """Relative pose src->dst from two world-from-camera 3x4 matrices."""
    r_src, t_src = pose_src[:, :3], pose_src[:, 3]
    r_dst, t_dst = pose_dst[:, :3], pose_dst[:, 3]
    return RelativePose(r_dst.T @ r_src, r_dst.T @ (t_src - t_dst))


@dataclass
class FrameGeometry:
    """Per-frame depth raster, intrinsics, and world-from-camera pose."""

    depth: Raster2D  # 1-channel, positive wherever valid
    intrinsics: Pinhole
    pose: np.ndarray  # (3, 4) world-from-camera

    def __post_init__(self):
        if self.depth.channels != 1:
            raise ValidationError("depth raster must have exactly 1 channel")
        d = self.depth.plane()
        if (d[self.depth.valid_mask()] <= 0).any():
            raise ValidationError("depth must be positive wherever the mask is true")
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(3, 4)

    @property
    def width(self) -> int:
        return self.depth.width

    @property
    def height(self) -> int:
        return self.depth.height


# --------------------------------------------------------------------------
# Point-level operations
# --------------------------------------------------------------------------


def backproject(p: tuple[float, float], depth: float, k: Pinhole) -> np.ndarray:
    """Lift pixel p at the given depth into camera space."""
    if depth <= 0:
        raise DomainError(f"depth must be positive, got {depth}")
    u, v = p
    return np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])


def project(x: np.ndarray, k: Pinhole) -> tuple[tuple[float, float], float]:
    """Project a camera-space point; returns ((u, v), depth)."""
    x = np.asarray(x, dtype=np.float64)
    z = float(x[2])
    if z <= EPS_Z:
        raise BehindCameraError(f"point depth {z} is at or behind the camera cutoff {EPS_Z}")
    return (k.fx * float(x[0]) / z + k.cx, k.fy * float(x[1]) / z + k.cy), z


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) coordinate arrays of shape (H, W), float64."""
    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    return np.meshgrid(u, v)


def camera_rays(width: int, height: int, k: Pinhole) -> np.ndarray:
    """K^{-1} p_tilde for every pixel, shape (H, W, 3), z-component 1."""
    uu, vv = pixel_grid(width, height)
    rays = np.empty((height, width, 3), dtype=np.float64)
    rays[:, :, 0] = (uu - k.cx) / k.fx
    rays[:, :, 1] = (vv - k.cy) / k.fy
    rays[:, :, 2] = 1.0
    return rays


# --------------------------------------------------------------------------
# Bilinear sampling
# --------------------------------------------------------------------------


_BORDER_EPS = 1e-9  # px; absorbs projection round-trip noise at the image border


def bilinear_footprint(height: int, width: int, xs: np.ndarray, ys: np.ndarray):
    """Clamped 4-neighbor footprint of bilinear sampling at float coords.

    Returns (x0, y0, x1, y1, fx, fy, inside): integer corner indices, the
    fractional offsets within the cell, and the in-bounds predicate.
    Out-of-range coordinates are clamped so the indices stay usable; the
    in-bounds test tolerates sub-nanopixel excursions so border pixels do
    not drop out to rounding noise.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = (
        (xs >= -_BORDER_EPS)
        & (xs <= width - 1 + _BORDER_EPS)
        & (ys >= -_BORDER_EPS)
        & (ys <= height - 1 + _BORDER_EPS)
    )
    xc = np.clip(xs, 0.0, width - 1)
    yc = np.clip(ys, 0.0, height - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    return x0, y0, x1, y1, xc - x0, yc - y0, inside


_WEIGHT_EPS = 1e-12  # below this a neighbor is treated as non-contributing


def _bilinear_arrays(
    values: np.ndarray,
    valid: Optional[np.ndarray],
    xs: np.ndarray,
    ys: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear interpolation of (H, W[, C]) ``values`` at float coords.

    Returns (sampled, ok).  A sample is ok iff it lies inside
    [0, W-1] x [0, H-1] and every neighbor with meaningful weight is valid;
    weights at rounding-noise level neither contribute nor invalidate.
    Invalid neighbor values are zeroed before blending (they may hold NaN).
    Out-of-range samples return 0.
    """
    h, w = values.shape[:2]
    x0, y0, x1, y1, fx, fy, inside = bilinear_footprint(h, w, xs, ys)

    w00 = (1.0 - fx) * (1.0 - fy)
    w10 = fx * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w11 = fx * fy

    ok = inside.copy()
    taps = []
    for wgt, yy, xx in ((w00, y0, x0), (w10, y0, x1), (w01, y1, x0), (w11, y1, x1)):
        v = values[yy, xx]
        if valid is not None:
            m = valid[yy, xx]
            ok &= m | (wgt < _WEIGHT_EPS)
            v = np.where(m[..., None] if v.ndim > m.ndim else m, v, 0.0)
        taps.append(wgt[..., None] * v if v.ndim > wgt.ndim else wgt * v)
    sampled = taps[0] + taps[1] + taps[2] + taps[3]
    sampled = np.where(ok[..., None] if sampled.ndim > ok.ndim else ok, sampled, 0.0)
    return sampled, ok


def bilinear_sample(raster: Raster2D, q: tuple[float, float]) -> tuple[np.ndarray, bool]:
    """Sample a raster at a continuous pixel coordinate.

    Returns (values, valid).  Invalid when q falls outside the image domain
    or when any neighbor that actually contributes weight is masked false.
    """
    xs = np.array([q[0]])
    ys = np.array([q[1]])
    mask = raster.mask if raster.mask is not None else None
    vals, ok = _bilinear_arrays(raster.data.astype(np.float64), mask, xs, ys)
    return vals[0], bool(ok[0])


def nearest_lookup(values: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Nearest-neighbor lookup of a bool raster; out-of-bounds reads False."""
    h, w = values.shape
    xi = np.rint(xs).astype(np.int64)
    yi = np.rint(ys).astype(np.int64)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros(xs.shape, dtype=bool)
    out[inside] = values[yi[inside], xi[inside]]
    return out


# --------------------------------------------------------------------------
# Dense depth reprojection
# --------------------------------------------------------------------------


@dataclass
class DepthReprojection:
    """Per-pixel products of projecting a source depth map into a target view.

    All arrays are float64 and share the source resolution.  ``valid`` means
    the source depth is valid, the transformed point is in front of the
    camera, the projection lands inside the target image, and the target
    depth footprint is valid; this is exactly the domain on which the
    structure residual is defined.
    """

    z_src: np.ndarray  # source depth D_c(p)
    ray_dir: np.ndarray  # (H, W, 3) R @ K_c^{-1} p_tilde
    point: np.ndarray  # (H, W, 3) transformed camera-space point
    px: np.ndarray  # projected u in the target image
    py: np.ndarray  # projected v
    z_proj: np.ndarray  # depth of the transformed point in the target camera
    d_hat: np.ndarray  # bilinearly sampled target depth at (px, py)
    front: np.ndarray  # bool: source depth valid and z_proj > EPS_Z
    valid: np.ndarray  # bool: front AND sample in-bounds with valid footprint


def project_depth(geom_src: FrameGeometry, geom_dst: FrameGeometry, pose: RelativePose) -> DepthReprojection:
    """Project every source pixel into the target view and sample its depth."""
    h, w = geom_src.height, geom_src.width
    k_src = geom_src.intrinsics
    k_dst = geom_dst.intrinsics

    rays = camera_rays(w, h, k_src)
    g = rays @ pose.rotation.T  # R @ ray per pixel
    z = geom_src.depth.plane().astype(np.float64)
    point = g * z[:, :, None] + pose.translation[None, None, :]

    src_ok = geom_src.depth.valid_mask()
    front = src_ok & (point[:, :, 2] > EPS_Z)

    zp = np.where(front, point[:, :, 2], 1.0)  # placeholder 1.0 avoids div warnings
    px = k_dst.fx * point[:, :, 0] / zp + k_dst.cx
    py = k_dst.fy * point[:, :, 1] / zp + k_dst.cy
    px = np.where(front, px, -1.0)
    py = np.where(front, py, -1.0)

    d_hat, samp_ok = _bilinear_arrays(
        geom_dst.depth.plane().astype(np.float64), geom_dst.depth.valid_mask(), px, py
    )
    valid = front & samp_ok
    return DepthReprojection(
        z_src=z,
        ray_dir=g,
        point=point,
        px=px,
        py=py,
        z_proj=point[:, :, 2],
        d_hat=d_hat,
        front=front,
        valid=valid,
    )


def rigid_flow(geom_c: FrameGeometry, pose_c_to_i: RelativePose, k_i: Pinhole) -> Raster2D:
    """Pixel displacement induced by camera motion over a static scene.

    Output mask is false where the source depth is invalid or the
    transformed point falls at or behind the target camera.  Points that
    project outside the target image bounds are still valid: the
    displacement is well-defined even when it leaves the frame.

    With an identity relative pose and matching intrinsics the projection
    chain is the mathematical identity, so the flow is returned as exact
    zeros rather than round-trip rounding noise.
    """
    h, w = geom_c.height, geom_c.width
    if (
        np.array_equal(pose_c_to_i.rotation, np.eye(3))
        and not pose_c_to_i.translation.any()
        and k_i == geom_c.intrinsics
    ):
        return Raster2D(data=np.zeros((h, w, 2), dtype=np.float32), mask=geom_c.depth.valid_mask().copy())
    rays = camera_rays(w, h, geom_c.intrinsics)
    g = rays @ pose_c_to_i.rotation.T
    z = geom_c.depth.plane().astype(np.float64)
    point = g * z[:, :, None] + pose_c_to_i.translation[None, None, :]

    ok = geom_c.depth.valid_mask() & (point[:, :, 2] > EPS_Z)
    zp = np.where(ok, point[:, :, 2], 1.0)
    uu, vv = pixel_grid(w, h)
    flow = np.zeros((h, w, 2), dtype=np.float64)
    flow[:, :, 0] = np.where(ok, k_i.fx * point[:, :, 0] / zp + k_i.cx - uu, 0.0)
    flow[:, :, 1] = np.where(ok, k_i.fy * point[:, :, 1] / zp + k_i.cy - vv, 0.0)
    return Raster2D(data=flow.astype(np.float32), mask=ok)


def forward_visibility(proj: DepthReprojection, tau: float) -> np.ndarray:
    """One direction of the visibility check: relative depth gap below tau.

    A source pixel passes when (z_proj - d_hat) / z_proj < tau, i.e. no
    closer surface hides the transported point in the target view.
    """
    gap = np.where(proj.valid, (proj.z_proj - proj.d_hat) / np.where(proj.valid, proj.z_proj, 1.0), np.inf)
    return proj.valid & (gap < tau)


def covisibility_masks(
    geom_a: FrameGeometry,
    geom_b: FrameGeometry,
    pose_a_to_b: RelativePose,
    tau: float = DEFAULT_TAU,
) -> tuple[np.ndarray, DepthReprojection]:
    """Bidirectional co-visibility mask for frame a against frame b.

    A pixel of frame a is co-visible iff the forward check passes and the
    reverse-direction check (projecting b into a) also passes at the
    corresponding target location.  Also returns the forward reprojection
    products (projected depths and sampled target depths) for reuse by the
    structure residual.
    """
    proj_ab = project_depth(geom_a, geom_b, pose_a_to_b)
    fwd_a = forward_visibility(proj_ab, tau)

    proj_ba = project_depth(geom_b, geom_a, pose_a_to_b.inverse())
    fwd_b = forward_visibility(proj_ba, tau)

    reverse_at_a = nearest_lookup(fwd_b, proj_ab.px, proj_ab.py)
    return fwd_a & reverse_at_a, proj_ab


def rescale_geometry(geom: FrameGeometry, new_width: int, new_height: int) -> FrameGeometry:
    """Resample a frame's depth to a new resolution, scaling intrinsics.

    Intrinsics scale multiplicatively (fx' = fx * sx, cx' = cx * sx, ...),
    matching the convention used when flow inputs are computed at a reduced
    resolution.  Depth is bilinearly resampled; pixels whose source
    footprint touches invalid depth become invalid.
    """
    sx = new_width / geom.width
    sy = new_height / geom.height
    uu, vv = pixel_grid(new_width, new_height)
    vals, ok = _bilinear_arrays(
        geom.depth.plane().astype(np.float64), geom.depth.valid_mask(), uu / sx, vv / sy
    )
    vals = np.where(ok, vals, 1.0)  # placeholder for masked pixels, kept positive
    return FrameGeometry(
        depth=Raster2D(data=vals.astype(np.float32), mask=ok),
        intrinsics=geom.intrinsics.scaled(sx, sy),
        pose=geom.pose,
    )


def check_resolution(*rasters: Raster2D) -> None:
    shapes = {(r.height, r.width) for r in rasters}
    if len(shapes) > 1:
        raise ShapeError(f"rasters must share one resolution, got {sorted(shapes)}")
