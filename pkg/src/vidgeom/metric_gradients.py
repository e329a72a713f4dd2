"""Scalar consistency loss and its analytic gradients w.r.t. flow and depth.

The loss aggregates the fused inconsistency map over a set of center frames
and temporal offsets:

    L = 1 / (|C| * |K|) * sum_c sum_k sum_p fused_(c, c+k)(p)

with the inner sum over valid pixels (optionally their mean instead, see
``LossSpec.pixel_mean``).  Validity and co-visibility masks, and the
4-neighbor footprint of every bilinear sample, are treated as constants
during differentiation; within a footprint cell the interpolation weights
are differentiated, so depth gradients flow through three channels:

* the source depth scales the rigid flow (motion branch),
* the source depth moves the projected point, changing both z_proj and the
  location at which the target depth is sampled (structure branch),
* the target depth enters through the four bilinear taps of that sample.

At pixels where the fused value vanishes the square root is not
differentiable; the subgradient 0 is used (radicand below 1e-12).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .camera_geometry import (
    DEFAULT_TAU,
    FrameGeometry,
    Pinhole,
    RelativePose,
    bilinear_footprint,
    covisibility_masks,
    pixel_grid,
)
from .errors import DomainError, MissingInputError
from .tensor_io import Raster2D

EPS_GRAD = 1e-12


@dataclass(frozen=True)
class LossSpec:
    """Which (center, center+offset) pairs the loss aggregates over."""

    center_frames: tuple[int, ...]
    offsets: tuple[int, ...]
    pixel_mean: bool = False  # divide each pair's pixel sum by its valid count

    def __post_init__(self):
        if not self.center_frames or not self.offsets:
            raise DomainError("loss spec needs at least one center frame and one offset")
        if 0 in self.offsets:
            raise DomainError("offset 0 would pair a frame with itself")

    def pairs(self) -> list[tuple[int, int]]:
        return [(c, c + k) for c in self.center_frames for k in self.offsets]


@dataclass
class LossGradient:
    loss: float
    d_flow: dict[tuple[int, int], Raster2D] = field(default_factory=dict)
    d_depth: dict[int, Raster2D] = field(default_factory=dict)


def _resolve_pairs(clip, spec: LossSpec) -> list[tuple[int, int]]:
    indices = set(clip.frame_indices())
    pairs = spec.pairs()
    for c, i in pairs:
        if c not in indices or i not in indices:
            raise MissingInputError(f"loss pair ({c}, {i}) references a missing frame")
        if not clip.has_flow(c, i):
            raise MissingInputError(f"no flow for frame pair {c} -> {i}")
    return pairs


@dataclass
class _PairResult:
    pixel_sum: float
    valid_count: int
    d_flow: Optional[np.ndarray] = None  # (H, W, 2)
    d_depth_src: Optional[np.ndarray] = None  # (H, W)
    d_depth_dst: Optional[np.ndarray] = None  # (H, W) of the *target* frame


def _pair_terms(
    geom_c: FrameGeometry,
    geom_i: FrameGeometry,
    pose: RelativePose,
    flow: Raster2D,
    tau: float,
    want_grads: bool,
) -> _PairResult:
    covis, proj = covisibility_masks(geom_c, geom_i, pose, tau)
    k_i = geom_i.intrinsics
    h, w = geom_c.height, geom_c.width

    valid = proj.valid
    z_c = np.where(valid, proj.z_src, 1.0)
    e = proj.d_hat - proj.z_proj
    s = np.where(valid, np.abs(e) / z_c, 0.0)

    uu, vv = pixel_grid(w, h)
    chi = covis & flow.valid_mask()  # covis already implies a valid projection
    du = np.where(chi, flow.data[:, :, 0].astype(np.float64) - (proj.px - uu), 0.0)
    dv = np.where(chi, flow.data[:, :, 1].astype(np.float64) - (proj.py - vv), 0.0)

    radicand = (du / k_i.fx) ** 2 + (dv / k_i.fy) ** 2 + s**2
    fused = np.where(valid, np.sqrt(radicand), 0.0)
    pixel_sum = float(fused.sum())
    valid_count = int(valid.sum())

    if not want_grads:
        return _PairResult(pixel_sum, valid_count)

    # safe inverse of the fused value, zero where the subgradient is taken
    live = valid & (radicand >= EPS_GRAD)
    inv_m = np.where(live, 1.0 / np.where(live, fused, 1.0), 0.0)

    d_flow = np.zeros((h, w, 2), dtype=np.float64)
    d_flow[:, :, 0] = du / k_i.fx**2 * inv_m
    d_flow[:, :, 1] = dv / k_i.fy**2 * inv_m

    # projected-point sensitivity to the source depth: p' = K(g z + T)
    x, y, z = proj.point[:, :, 0], proj.point[:, :, 1], proj.point[:, :, 2]
    gx, gy, gz = proj.ray_dir[:, :, 0], proj.ray_dir[:, :, 1], proj.ray_dir[:, :, 2]
    zsafe = np.where(valid, z, 1.0)
    a_x = k_i.fx * (gx * zsafe - x * gz) / zsafe**2
    a_y = k_i.fy * (gy * zsafe - y * gz) / zsafe**2

    # target-depth sample: value gradient along p' inside the (frozen) cell
    dvals = geom_i.depth.plane().astype(np.float64)
    x0, y0, x1, y1, fx, fy, _ = bilinear_footprint(geom_i.height, geom_i.width, proj.px, proj.py)
    v00 = dvals[y0, x0]
    v10 = dvals[y0, x1]
    v01 = dvals[y1, x0]
    v11 = dvals[y1, x1]
    dd_dx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01)
    dd_dy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10)

    sign_e = np.sign(e)
    # motion branch: residual = flow - (p' - p), so d(residual)/dz = -a
    motion_dz = -(du / k_i.fx**2 * a_x + dv / k_i.fy**2 * a_y)
    # structure branch: s = |e| / z_c with de/dz = grad(d_hat) . a - gz,
    # plus the -s/z_c term from the 1/z_c factor itself
    de_dz = dd_dx * a_x + dd_dy * a_y - gz
    d_depth_src = inv_m * (motion_dz + s * (sign_e * de_dz / z_c - s / z_c))
    d_depth_src = np.where(live, d_depth_src, 0.0)

    # scatter the target-depth taps: dM/d(tap) = (s/M) * sign(e)/z_c * weight
    coef = np.where(live, inv_m * s * sign_e / z_c, 0.0)
    w00 = (1.0 - fx) * (1.0 - fy)
    w10 = fx * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w11 = fx * fy
    d_depth_dst = np.zeros((geom_i.height, geom_i.width), dtype=np.float64)
    np.add.at(d_depth_dst, (y0, x0), coef * w00)
    np.add.at(d_depth_dst, (y0, x1), coef * w10)
    np.add.at(d_depth_dst, (y1, x0), coef * w01)
    np.add.at(d_depth_dst, (y1, x1), coef * w11)

    return _PairResult(pixel_sum, valid_count, d_flow, d_depth_src, d_depth_dst)


def loss_geo(clip, spec: LossSpec, tau: float = DEFAULT_TAU) -> float:
    """Normalized aggregate of the fused map over the spec's frame pairs."""
    pairs = _resolve_pairs(clip, spec)
    total = 0.0
    for c, i in pairs:
        res = _pair_terms(
            clip.geometry(c), clip.geometry(i), clip.pose_between(c, i), clip.flow(c, i), tau, False
        )
        term = res.pixel_sum
        if spec.pixel_mean:
            term = term / res.valid_count if res.valid_count else 0.0
        total += term
    return total / len(pairs)


def loss_geo_backward(clip, spec: LossSpec, tau: float = DEFAULT_TAU) -> LossGradient:
    """Loss plus exact partials w.r.t. every flow and depth raster value.

    Gradient rasters share the shapes of their inputs and are zero wherever
    the input never enters a valid term.  Depth gradients accumulate over
    all pairs in pair order (deterministic reduction).
    """
    pairs = _resolve_pairs(clip, spec)
    norm = 1.0 / len(pairs)
    total = 0.0
    d_flow: dict[tuple[int, int], np.ndarray] = {}
    d_depth: dict[int, np.ndarray] = {}

    for c, i in pairs:
        geom_c = clip.geometry(c)
        geom_i = clip.geometry(i)
        res = _pair_terms(geom_c, geom_i, clip.pose_between(c, i), clip.flow(c, i), tau, True)
        scale = norm
        term = res.pixel_sum
        if spec.pixel_mean:
            count = res.valid_count if res.valid_count else 1
            term = res.pixel_sum / count if res.valid_count else 0.0
            scale = norm / count
        total += norm * term

        key = (c, i)
        d_flow[key] = d_flow.get(key, 0.0) + scale * res.d_flow
        d_depth[c] = d_depth.get(c, np.zeros((geom_c.height, geom_c.width))) + scale * res.d_depth_src
        d_depth[i] = d_depth.get(i, np.zeros((geom_i.height, geom_i.width))) + scale * res.d_depth_dst

    return LossGradient(
        loss=total,
        d_flow={k: Raster2D(data=v.astype(np.float32), mask=None) for k, v in d_flow.items()},
        d_depth={k: Raster2D(data=v.astype(np.float32), mask=None) for k, v in d_depth.items()},
    )


# --------------------------------------------------------------------------
# Finite-difference verification
# --------------------------------------------------------------------------


def snapshot_clip(clip, spec: LossSpec):
    """Materialize the rasters a loss spec touches into a MemoryClip."""
    from .consistency_metric import MemoryClip

    pairs = _resolve_pairs(clip, spec)
    frames = sorted({idx for pair in pairs for idx in pair})
    geoms = {t: clip.geometry(t) for t in frames}
    flows = {(c, i): clip.flow(c, i) for c, i in pairs}
    return MemoryClip(clip_id="snapshot", fps=getattr(clip, "fps", 1.0), geometries=geoms, flows=flows)


def _with_flow_value(clip, pair, yx, channel, value):
    from dataclasses import replace as dc_replace

    y, x = yx
    raster = clip.flows[pair]
    data = raster.data.copy()
    data[y, x, channel] = value
    flows = dict(clip.flows)
    flows[pair] = Raster2D(data=data, mask=raster.mask)
    return dc_replace(clip, flows=flows)


def _with_depth_value(clip, frame, yx, value):
    from dataclasses import replace as dc_replace

    y, x = yx
    geom = clip.geometries[frame]
    data = geom.depth.data.copy()
    data[y, x, 0] = value
    geoms = dict(clip.geometries)
    geoms[frame] = FrameGeometry(
        depth=Raster2D(data=data, mask=geom.depth.mask), intrinsics=geom.intrinsics, pose=geom.pose
    )
    return dc_replace(clip, geometries=geoms)


def fd_flow_gradient(clip, spec: LossSpec, tau, pair, yx, channel, step: float) -> float:
    """Central finite difference of the loss w.r.t. one stored flow value.

    The realized float32 steps are measured and used as the divisor, so the
    estimate is not polluted by input quantization.
    """
    y, x = yx
    base = float(clip.flows[pair].data[y, x, channel])
    hi = np.float32(base + step)
    lo = np.float32(base - step)
    l_hi = loss_geo(_with_flow_value(clip, pair, yx, channel, hi), spec, tau)
    l_lo = loss_geo(_with_flow_value(clip, pair, yx, channel, lo), spec, tau)
    return (l_hi - l_lo) / (float(hi) - float(lo))


def fd_depth_gradient(clip, spec: LossSpec, tau, frame, yx, step: float) -> float:
    """Central finite difference of the loss w.r.t. one stored depth value."""
    y, x = yx
    base = float(clip.geometries[frame].depth.data[y, x, 0])
    hi = np.float32(base + step)
    lo = np.float32(base - step)
    l_hi = loss_geo(_with_depth_value(clip, frame, yx, hi), spec, tau)
    l_lo = loss_geo(_with_depth_value(clip, frame, yx, lo), spec, tau)
    return (l_hi - l_lo) / (float(hi) - float(lo))


@dataclass
class GradientCheck:
    kind: str  # "flow" | "depth"
    key: tuple[int, int] | int  # flow pair or depth frame index
    y: int
    x: int
    channel: int
    analytic: float
    fd: float

    def describe(self) -> str:
        if self.kind == "flow":
            return f"flow{self.key} pixel ({self.y}, {self.x}) channel {self.channel}"
        return f"depth[{self.key}] pixel ({self.y}, {self.x})"


def _safe_pair_masks(geom_c, geom_i, pose, flow, tau):
    """Pixels where FD of the loss is trustworthy for this pair.

    Excludes anything near a validity/co-visibility boundary (2-pixel
    erosion), near-threshold visibility gaps, near-kink values of the
    structure residual, and (for depth perturbations only) pixels whose
    target-depth sample sits near a bilinear cell edge along an axis the
    projected point actually moves along.  Returns (safe_flow, safe_depth,
    (y0, x0)) with the footprint corner for target-depth coordinates.
    """
    from scipy import ndimage

    covis, proj = covisibility_masks(geom_c, geom_i, pose, tau)
    live = proj.valid & covis & flow.valid_mask()

    z_safe = np.where(proj.valid, proj.z_proj, 1.0)
    gap = np.where(proj.valid, (proj.z_proj - proj.d_hat) / z_safe, np.inf)
    margin_ok = np.abs(gap) < 0.5 * tau

    e = proj.d_hat - proj.z_proj
    s = np.where(proj.valid, np.abs(e) / np.where(proj.valid, proj.z_src, 1.0), 0.0)
    # |e| kinks: flow perturbations never move e, so an exactly symmetric
    # kink (e == 0) is fine there; depth perturbations do move e, and at
    # e == 0 the central difference picks up an O(h^2) curvature artifact
    # from s^2 = e^2/z^2, so depth sampling demands a real margin
    kink_ok_flow = (s > 1e-3) | (e == 0.0)
    kink_ok_depth = s > 1e-3

    # keep central differences away from the fused map's sqrt kink
    k_i0 = geom_i.intrinsics
    uu, vv = pixel_grid(geom_c.width, geom_c.height)
    chi = covis & flow.valid_mask()
    du = np.where(chi, flow.data[:, :, 0].astype(np.float64) - (proj.px - uu), 0.0)
    dv = np.where(chi, flow.data[:, :, 1].astype(np.float64) - (proj.py - vv), 0.0)
    fused = np.sqrt((du / k_i0.fx) ** 2 + (dv / k_i0.fy) ** 2 + s**2)
    fused_ok = fused > 5e-4

    eroded = ndimage.binary_erosion(live, iterations=2)
    safe_flow = eroded & margin_ok & kink_ok_flow & fused_ok

    # depth steps move the projection by dp' = a * dz; demand either a cell
    # margin or an immobile axis so FD never straddles an interpolation kink
    k_i = geom_i.intrinsics
    x, y, z = proj.point[:, :, 0], proj.point[:, :, 1], proj.point[:, :, 2]
    gx, gy, gz = proj.ray_dir[:, :, 0], proj.ray_dir[:, :, 1], proj.ray_dir[:, :, 2]
    zz = np.where(proj.front, z, 1.0)
    a_x = k_i.fx * (gx * zz - x * gz) / zz**2
    a_y = k_i.fy * (gy * zz - y * gz) / zz**2
    x0, y0, x1, y1, fx, fy, _ = bilinear_footprint(geom_i.height, geom_i.width, proj.px, proj.py)
    ax_ok = ((fx > 0.1) & (fx < 0.9)) | (np.abs(a_x) < 1e-9)
    ay_ok = ((fy > 0.1) & (fy < 0.9)) | (np.abs(a_y) < 1e-9)
    safe_depth = eroded & margin_ok & kink_ok_depth & fused_ok & ax_ok & ay_ok
    return safe_flow, safe_depth, (y0, x0)


def sample_gradient_checks(
    clip,
    spec: LossSpec,
    tau: float,
    grad: LossGradient,
    rng: np.random.Generator,
    n_samples: int = 40,
    fd_flow_step: float = 1e-3,
    fd_depth_rel: float = 1e-4,
) -> list[GradientCheck]:
    """Compare analytic and finite-difference gradients at safe coordinates.

    Coordinates are drawn from pixels where the loss is locally smooth (see
    ``_safe_pair_masks``); the sample budget is split between flow values,
    source-frame depths, and target-frame depths (via footprint corners).
    """
    pairs = _resolve_pairs(clip, spec)
    flow_coords: list[tuple[tuple[int, int], int, int]] = []
    src_coords: list[tuple[int, tuple[int, int]]] = []
    dst_coords: list[tuple[int, tuple[int, int]]] = []

    for c, i in pairs:
        safe_flow, safe_depth, (y0, x0) = _safe_pair_masks(
            clip.geometry(c), clip.geometry(i), clip.pose_between(c, i), clip.flow(c, i), tau
        )
        take = max(4 * n_samples // len(pairs), 8)
        ys, xs = np.nonzero(safe_flow)
        if len(ys):
            pick = rng.choice(len(ys), size=min(len(ys), take), replace=False)
            flow_coords.extend(((c, i), int(ys[j]), int(xs[j])) for j in pick)
        ys, xs = np.nonzero(safe_depth)
        if len(ys):
            pick = rng.choice(len(ys), size=min(len(ys), take), replace=False)
            for j in pick:
                y, x = int(ys[j]), int(xs[j])
                src_coords.append((c, (y, x)))
                dst_coords.append((i, (int(y0[y, x]), int(x0[y, x]))))

    checks: list[GradientCheck] = []
    n_flow = max(1, n_samples // 2)
    n_src = max(1, n_samples // 4)
    n_dst = max(1, n_samples - n_flow - n_src)

    if flow_coords:
        idx = rng.choice(len(flow_coords), size=min(n_flow, len(flow_coords)), replace=False)
        for j in idx:
            pair, y, x = flow_coords[j]
            ch = int(rng.integers(2))
            fd = fd_flow_gradient(clip, spec, tau, pair, (y, x), ch, fd_flow_step)
            analytic = float(grad.d_flow[pair].data[y, x, ch])
            checks.append(GradientCheck("flow", pair, y, x, ch, analytic, fd))

    if src_coords:
        idx = rng.choice(len(src_coords), size=min(n_src, len(src_coords)), replace=False)
        for j in idx:
            frame, (y, x) = src_coords[j]
            z = float(clip.geometries[frame].depth.data[y, x, 0])
            fd = fd_depth_gradient(clip, spec, tau, frame, (y, x), fd_depth_rel * z)
            analytic = float(grad.d_depth[frame].data[y, x, 0])
            checks.append(GradientCheck("depth", frame, y, x, 0, analytic, fd))

    if dst_coords:
        seen: set[tuple[int, int, int]] = set()
        idx = rng.choice(len(dst_coords), size=min(n_dst, len(dst_coords)), replace=False)
        for j in idx:
            frame, (y, x) = dst_coords[j]
            if (frame, y, x) in seen:
                continue
            seen.add((frame, y, x))
            z = float(clip.geometries[frame].depth.data[y, x, 0])
            fd = fd_depth_gradient(clip, spec, tau, frame, (y, x), fd_depth_rel * z)
            analytic = float(grad.d_depth[frame].data[y, x, 0])
            checks.append(GradientCheck("depth", frame, y, x, 0, analytic, fd))

    return checks
