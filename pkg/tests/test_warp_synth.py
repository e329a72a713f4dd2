"""Thin-plate-spline warps, control sampling, and deformation injection."""

import numpy as np
import pytest

from vidgeom import scene_synth as ss
from vidgeom import warp_synth as ws
from vidgeom.consistency_metric import frame_level_scores
from vidgeom.errors import DomainError, SolveError
from vidgeom.tensor_io import Raster2D


# --------------------------------------------------------------------------
# Farthest-point sampling
# --------------------------------------------------------------------------


def brute_force_fps(mask, k, first_xy):
    ys, xs = np.nonzero(mask)
    pts = np.stack([xs, ys], axis=1).astype(float)
    chosen = [int(np.nonzero((pts == first_xy).all(axis=1))[0][0])]
    for _ in range(1, k):
        best_j, best_d = -1, -1.0
        for j in range(len(pts)):
            d = min(np.sum((pts[j] - pts[c]) ** 2) for c in chosen)
            if d > best_d:
                best_j, best_d = j, d
        chosen.append(best_j)
    return pts[chosen]


def test_fps_single_point_is_seeded_choice():
    mask = np.ones((5, 7), bool)
    a = ws.farthest_point_sample(mask, 1, seed=42)
    b = ws.farthest_point_sample(mask, 1, seed=42)
    assert np.array_equal(a, b)
    assert mask[int(a[0, 1]), int(a[0, 0])]


def test_fps_two_points_are_diagonal_extremes():
    mask = np.ones((9, 9), bool)
    pts = ws.farthest_point_sample(mask, 2, seed=3)
    first, second = pts
    d = np.sum((second - first) ** 2)
    # the second point must be at max distance from the first: a corner
    corners = np.array([[0, 0], [8, 0], [0, 8], [8, 8]], float)
    assert max(np.sum((c - first) ** 2) for c in corners) == d


def test_fps_from_center_picks_four_corners():
    mask = np.ones((9, 9), bool)
    center = np.array([4.0, 4.0])
    seed = next(
        s for s in range(3000)
        if np.array_equal(ws.farthest_point_sample(mask, 1, seed=s)[0], center)
    )
    pts = ws.farthest_point_sample(mask, 5, seed=seed)
    corners = {(0.0, 0.0), (8.0, 0.0), (0.0, 8.0), (8.0, 8.0)}
    assert {tuple(p) for p in pts[1:]} == corners
    oracle = brute_force_fps(mask, 5, center)
    assert np.array_equal(pts, oracle)


def test_fps_matches_brute_force_on_random_masks():
    rng = np.random.default_rng(0)
    for trial in range(5):
        mask = rng.random((12, 15)) < 0.5
        mask[3, 4] = True
        pts = ws.farthest_point_sample(mask, 6, seed=trial)
        oracle = brute_force_fps(mask, 6, pts[0])
        assert np.array_equal(pts, oracle)


def test_fps_rejects_undersized_mask():
    mask = np.zeros((4, 4), bool)
    mask[0, 0] = True
    with pytest.raises(DomainError):
        ws.farthest_point_sample(mask, 2, seed=0)


# --------------------------------------------------------------------------
# TPS fit and evaluation
# --------------------------------------------------------------------------


def random_controls(rng, k, span=200.0, min_sep=6.0):
    pts = [rng.uniform(0, span, 2)]
    while len(pts) < k:
        cand = rng.uniform(0, span, 2)
        if min(np.linalg.norm(cand - p) for p in pts) >= min_sep:
            pts.append(cand)
    return np.array(pts)


def test_tps_identity_warp():
    rng = np.random.default_rng(1)
    c = random_controls(rng, 6)
    w = ws.fit_tps(c, c)
    np.testing.assert_allclose(w.affine, np.eye(2), atol=1e-10)
    np.testing.assert_allclose(w.offset, 0.0, atol=1e-8)
    np.testing.assert_allclose(w.rbf_weights, 0.0, atol=1e-10)


def test_tps_pure_translation_is_affine():
    rng = np.random.default_rng(2)
    c = random_controls(rng, 5)
    t = np.array([3.5, -2.0])
    w = ws.fit_tps(c, c + t)
    np.testing.assert_allclose(w.affine, np.eye(2), atol=1e-9)
    np.testing.assert_allclose(w.offset, t, atol=1e-7)
    np.testing.assert_allclose(w.rbf_weights, 0.0, atol=1e-9)


def test_tps_interpolates_and_satisfies_side_conditions():
    rng = np.random.default_rng(3)
    for k in (3, 4, 6, 9, 12):
        c = random_controls(rng, k)
        y = c + rng.uniform(-20, 20, c.shape)
        w = ws.fit_tps(c, y)
        assert np.abs(ws.evaluate_warp(w, c) - y).max() <= 1e-6
        assert np.abs(w.rbf_weights.sum(axis=0)).max() <= 1e-8
        assert np.abs((w.rbf_weights[:, None, :] * c[:, :, None]).sum(axis=0)).max() <= 1e-8


def test_tps_collinear_controls_rejected():
    c = np.array([[0.0, 0.0], [10.0, 10.0], [20.0, 20.0], [30.0, 30.0]])
    with pytest.raises(SolveError):
        ws.fit_tps(c, c + 1.0)


def test_evaluate_warp_matches_term_by_term_evaluation():
    rng = np.random.default_rng(4)
    c = random_controls(rng, 3)
    y = c + rng.uniform(-10, 10, c.shape)
    w = ws.fit_tps(c, y)
    p = 0.5 * (c[0] + c[1])
    manual = w.affine @ p + w.offset
    for i in range(3):
        r = np.linalg.norm(p - c[i])
        manual = manual + w.rbf_weights[i] * (r * r * np.log(r) if r > 0 else 0.0)
    np.testing.assert_allclose(ws.evaluate_warp(w, p), manual, rtol=1e-12)


def test_warp_continuous_at_control_points():
    rng = np.random.default_rng(5)
    c = random_controls(rng, 5)
    y = c + rng.uniform(-15, 15, c.shape)
    w = ws.fit_tps(c, y)
    at = ws.evaluate_warp(w, c[2])
    near = ws.evaluate_warp(w, c[2] + np.array([1e-9, 0.0]))
    assert np.isfinite(near).all()
    np.testing.assert_allclose(near, at, atol=1e-6)
    np.testing.assert_allclose(at, y[2], atol=1e-6)


# --------------------------------------------------------------------------
# Displacement fields and frame warping
# --------------------------------------------------------------------------


def test_field_beta_zero_is_feathered_displacement():
    rng = np.random.default_rng(6)
    c = random_controls(rng, 4, span=30.0)
    w = ws.fit_tps(c, c + rng.uniform(-4, 4, c.shape))
    feather = np.full((32, 32), 0.5)
    prev = np.ones((32, 32, 2))
    f = ws.displacement_field(w, (32, 32), feather, prev_ema=prev, beta=0.0)
    ref = ws.displacement_field(w, (32, 32), feather)
    np.testing.assert_array_equal(f.displacement.data, ref.displacement.data)


def test_field_zero_feather_annihilates():
    rng = np.random.default_rng(7)
    c = random_controls(rng, 4, span=30.0)
    w = ws.fit_tps(c, c + 5.0)
    f = ws.displacement_field(w, (16, 16), np.zeros((16, 16)))
    np.testing.assert_array_equal(f.displacement.data, 0.0)
    np.testing.assert_array_equal(f.magnitude.data, 0.0)


def test_field_single_ema_step():
    f = ws.displacement_field(None, (4, 4), np.ones((4, 4)))
    const = np.zeros((4, 4, 2))
    const[:, :, 0] = 2.0
    blended = ws.displacement_field(None, (4, 4), np.ones((4, 4)), prev_ema=None, beta=0.5)
    # beta applies only when a previous field exists
    np.testing.assert_array_equal(blended.displacement.data, 0.0)
    # one EMA step from (0,0) toward a constant (2,0) at beta=0.5 gives (1,0)
    prev = np.zeros((4, 4, 2))
    rng = np.random.default_rng(8)
    c = random_controls(rng, 4, span=3.0, min_sep=0.8)
    w = ws.fit_tps(c, c + np.array([2.0, 0.0]))
    stepped = ws.displacement_field(w, (4, 4), np.ones((4, 4)), prev_ema=prev, beta=0.5)
    np.testing.assert_allclose(stepped.displacement.data[:, :, 0], 1.0, atol=1e-5)
    np.testing.assert_allclose(stepped.displacement.data[:, :, 1], 0.0, atol=1e-5)
    assert f is not None


def test_ema_contracts_geometrically():
    rng = np.random.default_rng(9)
    c = random_controls(rng, 4, span=10.0, min_sep=2.0)
    w = ws.fit_tps(c, c + np.array([3.0, 0.0]))
    feather = np.ones((8, 8))
    beta = 0.7
    prev = np.zeros((8, 8, 2))
    errs = []
    for _ in range(6):
        field = ws.displacement_field(w, (8, 8), feather, prev_ema=prev, beta=beta)
        prev = field.displacement.data.astype(np.float64)
        errs.append(np.abs(prev[:, :, 0] - 3.0).max())
    ratios = [errs[i + 1] / errs[i] for i in range(len(errs) - 1)]
    np.testing.assert_allclose(ratios, beta, rtol=1e-4)


def test_magnitude_is_norm_of_channels():
    rng = np.random.default_rng(10)
    c = random_controls(rng, 5, span=20.0, min_sep=3.0)
    w = ws.fit_tps(c, c + rng.uniform(-6, 6, c.shape))
    f = ws.displacement_field(w, (24, 24), np.ones((24, 24)))
    disp = f.displacement.data
    expected = np.hypot(disp[:, :, 0].astype(np.float64), disp[:, :, 1].astype(np.float64))
    assert np.array_equal(f.magnitude.plane(), expected.astype(np.float32))


def test_warp_frame_zero_field_identity():
    frame = Raster2D(data=np.arange(24, dtype=np.float32).reshape(4, 6))
    field = ws.displacement_field(None, (4, 6), np.ones((4, 6)))
    out = ws.warp_frame(frame, field)
    assert np.array_equal(out.data, frame.data)
    assert out.valid_mask().all()


def test_warp_frame_shifts_ramp():
    h, w = 6, 10
    uu = np.tile(np.arange(w, dtype=np.float32), (h, 1))
    frame = Raster2D(data=uu)
    disp = np.zeros((h, w, 2), dtype=np.float32)
    disp[:, :, 0] = 1.0
    field = ws.GroundTruthField(
        displacement=Raster2D(data=disp),
        magnitude=Raster2D(data=np.ones((h, w), dtype=np.float32)),
    )
    out = ws.warp_frame(frame, field)
    interior = out.valid_mask()
    np.testing.assert_allclose(out.plane()[:, :-1], uu[:, :-1] + 1.0, atol=1e-6)
    assert not interior[:, -1].any()  # lookups past the right edge are invalid


# --------------------------------------------------------------------------
# Clip-level injection
# --------------------------------------------------------------------------


def base_warp_clip(seed=0, frames=8):
    rng = np.random.default_rng(seed)
    scene = ss.preset_warp_scene(96, 72, frames, 8.0, rng)
    return ss.generate_rigid_clip(scene, flow_offsets=(-2, -1, 1, 2))


def test_zero_scale_injection_is_bit_exact_noop():
    base = base_warp_clip()
    spec = ws.DeformClipSpec(displacement_scale=0.0)
    clip, fields = ws.generate_warp_clip(base, spec, [3, 4], seed=5)
    for t in base.frame_indices():
        assert clip.geometry(t).depth.data.tobytes() == base.geometry(t).depth.data.tobytes()
        assert np.array_equal(clip.geometry(t).depth.valid_mask(), base.geometry(t).depth.valid_mask())
    for k in base.flows:
        assert clip.flows[k].data.tobytes() == base.flows[k].data.tobytes()
        assert np.array_equal(clip.flows[k].valid_mask(), base.flows[k].valid_mask())
    assert all(np.array_equal(f.displacement.data, 0.0 * f.displacement.data) for f in fields.values())


def test_single_warped_frame_attains_motion_argmax():
    base = base_warp_clip(seed=2)
    spec = ws.DeformClipSpec(displacement_scale=8.0)
    clip, fields = ws.generate_warp_clip(base, spec, [4], seed=11)
    scores = [s.motion_mean for s, _ in frame_level_scores(clip, window=5)]
    assert int(np.argmax(scores)) == 4
    assert scores[4] > 3 * max(s for i, s in enumerate(scores) if i != 4)


def test_ground_truth_entries_mask_matches_threshold():
    base = base_warp_clip(seed=3)
    spec = ws.DeformClipSpec(displacement_scale=8.0, mask_threshold=0.5)
    clip, fields = ws.generate_warp_clip(base, spec, [4], seed=12)
    disp, mask = clip.ground_truth[4]
    assert np.array_equal(mask.plane() > 0.5, fields[4].magnitude.plane() > 0.5)
    assert np.array_equal(disp.data, fields[4].displacement.data)
    assert (mask.plane() > 0.5).any()
