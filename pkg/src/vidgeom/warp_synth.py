"""Synthetic non-rigid deformation injection via thin-plate-spline warps.

A warp is an affine-plus-RBF mapping f(x) = A x + a + sum_i w_i phi(|x - c_i|)
with the thin-plate basis phi(r) = r^2 log r (phi(0) = 0), fit so that the
control points c_i map exactly onto their targets y_i.  Control points are
spread over a foreground mask by farthest-point sampling; per-frame targets
follow a sinusoidal drift.  The dense displacement U(p) = f(p) - p is
localized by a feathered weight map and smoothed over time with an
exponential moving average, and frames are deformed by backward sampling:
out(p) = in(p + U_bar(p)).

For every warped frame the dense displacement field and its magnitude are
kept as ground truth, and the clip's exact flow fields are re-composed with
the deformation so the benchmark stays self-consistent without re-running a
flow estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .camera_geometry import _bilinear_arrays
from .consistency_metric import MemoryClip
from .errors import DomainError, ShapeError, SolveError
from .tensor_io import Raster2D

_INTERP_TOL = 1e-6  # post-solve interpolation residual that flags ill-conditioning


@dataclass
class TpsWarp:
    controls: np.ndarray  # (K, 2)
    targets: np.ndarray  # (K, 2)
    affine: np.ndarray  # (2, 2)
    offset: np.ndarray  # (2,)
    rbf_weights: np.ndarray  # (K, 2)


@dataclass
class GroundTruthField:
    """Dense displacement (2-channel) and its per-pixel Euclidean magnitude."""

    displacement: Raster2D
    magnitude: Raster2D


@dataclass
class DeformClipSpec:
    control_count: int = 8
    displacement_scale: float = 6.0
    omega: float = 0.4  # radians per frame of the sinusoidal target drift
    ema_beta: float = 0.7
    feather_radius: float = 15.0
    mask_threshold: float = 0.5  # px; binarizes the GT magnitude
    region: str = "disk"  # "disk" | "rect" | "full"
    region_fraction: float = 0.35  # disk radius / rect half-extent, as a fraction of min(W, H)

    def __post_init__(self):
        if self.control_count < 3:
            raise DomainError("need at least 3 control points for a solvable warp")
        if not (0.0 <= self.ema_beta < 1.0):
            raise DomainError(f"ema_beta must be in [0, 1), got {self.ema_beta}")


# --------------------------------------------------------------------------
# Control-point sampling
# --------------------------------------------------------------------------


def farthest_point_sample(mask: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Greedy max-min point selection over the true pixels of ``mask``.

    The first point is drawn uniformly (seeded); each next point maximizes
    its distance to the already-chosen set, ties resolved by scan order.
    Returns (k, 2) points as (x, y) pixel coordinates.
    """
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if len(xs) < k:
        raise DomainError(f"mask has {len(xs)} candidates, need {k}")
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    rng = np.random.default_rng(seed)
    first = int(rng.integers(len(pts)))
    chosen = [first]
    d2 = np.sum((pts - pts[first]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return pts[chosen]


def disk_mask(width: int, height: int, fraction: float = 0.35) -> np.ndarray:
    uu, vv = np.meshgrid(np.arange(width), np.arange(height))
    r = fraction * min(width, height)
    return (uu - (width - 1) / 2.0) ** 2 + (vv - (height - 1) / 2.0) ** 2 <= r * r


def rect_mask(width: int, height: int, fraction: float = 0.35) -> np.ndarray:
    uu, vv = np.meshgrid(np.arange(width), np.arange(height))
    hx = fraction * width
    hy = fraction * height
    return (np.abs(uu - (width - 1) / 2.0) <= hx) & (np.abs(vv - (height - 1) / 2.0) <= hy)


def region_mask(spec: DeformClipSpec, width: int, height: int) -> np.ndarray:
    if spec.region == "disk":
        return disk_mask(width, height, spec.region_fraction)
    if spec.region == "rect":
        return rect_mask(width, height, spec.region_fraction)
    if spec.region == "full":
        return np.ones((height, width), dtype=bool)
    raise DomainError(f"unknown region kind '{spec.region}'")


def feather_weights(mask: np.ndarray, radius: float) -> np.ndarray:
    """Weight map rising linearly from the mask boundary, clamped to [0, 1]."""
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        return np.ones(mask.shape, dtype=np.float64)
    dist = ndimage.distance_transform_edt(mask)
    return np.clip(dist / max(radius, 1e-9), 0.0, 1.0)


# --------------------------------------------------------------------------
# Thin-plate-spline solve and evaluation
# --------------------------------------------------------------------------


def _tps_kernel(r: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = r * r * np.log(r)
    return np.where(r > 0.0, phi, 0.0)


def fit_tps(controls: np.ndarray, targets: np.ndarray, regularization: float = 0.0) -> TpsWarp:
    """Solve the (K+3)x(K+3) interpolation system mapping controls to targets.

    With zero regularization the warp interpolates exactly and the RBF
    weights satisfy sum(w) = 0 and sum(w_i c_i) = 0.  Collinear or
    coincident controls make the system singular and raise SolveError.
    """
    c = np.asarray(controls, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2 or c.shape != y.shape:
        raise DomainError(f"controls/targets must both be (K, 2), got {c.shape} and {y.shape}")
    k = c.shape[0]
    if k < 3:
        raise DomainError("need at least 3 control points")

    r = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=2)
    phi = _tps_kernel(r)
    if regularization:
        phi = phi + regularization * np.eye(k)
    p = np.concatenate([np.ones((k, 1)), c], axis=1)  # (K, 3)

    system = np.zeros((k + 3, k + 3))
    system[:k, :k] = phi
    system[:k, k:] = p
    system[k:, :k] = p.T
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = y
    try:
        sol = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolveError(f"TPS system is singular (collinear controls?): {exc}") from exc

    warp = TpsWarp(
        controls=c,
        targets=y,
        affine=sol[k + 1 :].T.copy(),  # rows of sol are [a_x; a_y] coefficients per output dim
        offset=sol[k].copy(),
        rbf_weights=sol[:k].copy(),
    )
    if regularization == 0.0:
        resid = np.max(np.abs(evaluate_warp(warp, c) - y))
        scale = 1.0 + float(np.max(np.abs(y)))
        if resid > _INTERP_TOL * scale:
            raise SolveError(f"TPS solve ill-conditioned: interpolation residual {resid:.3g}")
    return warp


def evaluate_warp(warp: TpsWarp, points: np.ndarray) -> np.ndarray:
    """f(x) = A x + a + sum_i w_i phi(|x - c_i|) for (..., 2) points."""
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    r = np.linalg.norm(flat[:, None, :] - warp.controls[None, :, :], axis=2)
    out = flat @ warp.affine.T + warp.offset + _tps_kernel(r) @ warp.rbf_weights
    return out.reshape(pts.shape)


def displacement_field(
    warp: Optional[TpsWarp],
    shape: tuple[int, int],
    feather: np.ndarray,
    prev_ema: Optional[np.ndarray] = None,
    beta: float = 0.0,
) -> GroundTruthField:
    """Feathered, EMA-smoothed dense displacement for one frame.

    U(p) = f(p) - p, masked by the feather weights, then blended as
    U_bar = beta * U_bar_prev + (1 - beta) * (w * U).  With no previous
    field the blend starts at the feathered displacement itself.  Passing
    ``warp=None`` produces an exactly zero displacement.
    """
    h, w = shape
    if feather.shape != (h, w):
        raise ShapeError(f"feather shape {feather.shape} does not match {(h, w)}")
    if warp is None:
        u = np.zeros((h, w, 2), dtype=np.float64)
    else:
        uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        grid = np.stack([uu, vv], axis=-1)
        u = evaluate_warp(warp, grid) - grid
    u_tilde = feather[:, :, None] * u
    if prev_ema is not None:
        prev = np.asarray(prev_ema, dtype=np.float64)
        if prev.shape != u_tilde.shape:
            raise ShapeError(f"prev_ema shape {prev.shape} does not match {u_tilde.shape}")
        u_bar = beta * prev + (1.0 - beta) * u_tilde
    else:
        u_bar = u_tilde
    disp = u_bar.astype(np.float32)
    mag = np.hypot(disp[:, :, 0].astype(np.float64), disp[:, :, 1].astype(np.float64))
    return GroundTruthField(
        displacement=Raster2D(data=disp, mask=None),
        magnitude=Raster2D(data=mag.astype(np.float32), mask=None),
    )


def warp_frame(frame: Raster2D, field: GroundTruthField) -> Raster2D:
    """Backward-sample a raster through the displacement: out(p) = in(p + U(p))."""
    if (frame.height, frame.width) != (field.displacement.height, field.displacement.width):
        raise ShapeError("frame and displacement field resolutions differ")
    h, w = frame.height, frame.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    disp = field.displacement.data.astype(np.float64)
    xs = uu + disp[:, :, 0]
    ys = vv + disp[:, :, 1]
    vals, ok = _bilinear_arrays(frame.data.astype(np.float64), frame.mask, xs, ys)
    if frame.channels == 1 and vals.ndim == 3:
        vals = vals[:, :, 0]
    vals = np.where(ok if vals.ndim == 2 else ok[:, :, None], vals, _safe_fill(frame))
    return Raster2D(data=vals.astype(np.float32), mask=ok)


def _safe_fill(frame: Raster2D) -> float:
    # masked pixels still need a value that passes downstream invariants
    # (depth rasters must stay positive), so reuse a representative one
    valid = frame.valid_mask()
    if valid.any():
        return float(frame.data[valid].flat[0])
    return 1.0


# --------------------------------------------------------------------------
# Clip-level deformation
# --------------------------------------------------------------------------


def generate_warp_clip(
    base: MemoryClip,
    spec: DeformClipSpec,
    warped_indices: Sequence[int],
    seed: int,
) -> tuple[MemoryClip, dict[int, GroundTruthField]]:
    """Inject the deformation into selected frames of an exact-GT clip.

    The depth raster of each warped frame is backward-sampled through its
    displacement field.  Flow fields touching a warped frame are composed
    with the deformation: flow arriving at warped frame b gains the
    displacement at the arrival point, F'(p) = F(p) + U_b(p + F(p)); flow
    leaving a warped frame a is re-based through the approximate inverse
    g(p) = p - U_a(p) (one fixed-point iteration), F'(p) = F(g(p)) + g(p) - p.
    Ground-truth displacement and a binary mask (magnitude > threshold) are
    attached for every warped frame.
    """
    warped = sorted(set(int(t) for t in warped_indices))
    for t in warped:
        if t not in base.geometries:
            raise DomainError(f"warped frame {t} not present in the base clip")
    if not warped:
        return base, {}

    any_geom = base.geometries[warped[0]]
    h, w = any_geom.height, any_geom.width
    mask = region_mask(spec, w, h)
    feather = feather_weights(mask, spec.feather_radius)
    rng = np.random.default_rng(seed)
    controls = farthest_point_sample(mask, spec.control_count, seed=int(rng.integers(2**31)))
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(spec.control_count, 2))

    fields: dict[int, GroundTruthField] = {}
    prev: Optional[np.ndarray] = None
    for t in warped:
        drift = spec.displacement_scale * np.sin(spec.omega * t + phases)
        if np.all(drift == 0.0):
            warp = None  # exact no-op keeps the output bit-identical to the input
        else:
            warp = fit_tps(controls, controls + drift)
        field = displacement_field(warp, (h, w), feather, prev_ema=prev, beta=spec.ema_beta)
        prev = field.displacement.data.astype(np.float64)
        fields[t] = field

    geoms = dict(base.geometries)
    for t in warped:
        g = base.geometries[t]
        geoms[t] = replace(g, depth=warp_frame(g.depth, fields[t]))

    flows: dict[tuple[int, int], Raster2D] = {}
    for (a, b), raster in base.flows.items():
        flows[(a, b)] = _compose_flow(raster, fields.get(a), fields.get(b))

    gt = dict(base.ground_truth)
    for t in warped:
        mag = fields[t].magnitude.plane()
        mask_raster = Raster2D(data=(mag > spec.mask_threshold).astype(np.float32), mask=None)
        gt[t] = (fields[t].displacement, mask_raster)

    clip = MemoryClip(
        clip_id=base.clip_id, fps=base.fps, geometries=geoms, flows=flows, ground_truth=gt
    )
    return clip, fields


def _compose_flow(
    flow: Raster2D,
    field_src: Optional[GroundTruthField],
    field_dst: Optional[GroundTruthField],
) -> Raster2D:
    if field_src is None and field_dst is None:
        return flow
    h, w = flow.height, flow.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    ok = flow.valid_mask().copy()

    if field_src is not None:
        disp_a = field_src.displacement.data.astype(np.float64)
        gx = uu - disp_a[:, :, 0]
        gy = vv - disp_a[:, :, 1]
        base_flow, ok_g = _bilinear_arrays(flow.data.astype(np.float64), flow.mask, gx, gy)
        fu = base_flow[:, :, 0] + (gx - uu)
        fv = base_flow[:, :, 1] + (gy - vv)
        ok &= ok_g
        arrive_x = gx + base_flow[:, :, 0]
        arrive_y = gy + base_flow[:, :, 1]
    else:
        fu = flow.data[:, :, 0].astype(np.float64)
        fv = flow.data[:, :, 1].astype(np.float64)
        arrive_x = uu + fu
        arrive_y = vv + fv

    if field_dst is not None:
        disp_b, ok_b = _bilinear_arrays(
            field_dst.displacement.data.astype(np.float64), None, arrive_x, arrive_y
        )
        fu = fu + disp_b[:, :, 0]
        fv = fv + disp_b[:, :, 1]
        ok &= ok_b

    out = np.stack([np.where(ok, fu, 0.0), np.where(ok, fv, 0.0)], axis=-1)
    return Raster2D(data=out.astype(np.float32), mask=ok)
