"""Loss aggregation and analytic-gradient verification."""

import numpy as np
import pytest

from vidgeom.camera_geometry import FrameGeometry, Pinhole
from vidgeom.consistency_metric import MemoryClip, compute_pair_maps
from vidgeom.errors import DomainError, MissingInputError
from vidgeom.metric_gradients import (
    LossSpec,
    fd_flow_gradient,
    loss_geo,
    loss_geo_backward,
    sample_gradient_checks,
    snapshot_clip,
)
from vidgeom.tensor_io import Raster2D

from conftest import perturbed_pair_clip


def single_pixel_clip(flow_u: float, fx: float = 100.0) -> MemoryClip:
    """Two identical 1x1 frames with an identity pose and a given flow."""
    geom = FrameGeometry(
        depth=Raster2D(data=np.full((1, 1, 1), 2.0, dtype=np.float32)),
        intrinsics=Pinhole(fx, fx, 0.0, 0.0),
        pose=np.hstack([np.eye(3), np.zeros((3, 1))]),
    )
    flow = Raster2D(data=np.array([[[flow_u, 0.0]]], dtype=np.float32))
    return MemoryClip(
        clip_id="toy", fps=1.0,
        geometries={0: geom, 1: geom},
        flows={(0, 1): flow, (1, 0): flow},
    )


def test_loss_single_term_sum():
    clip = single_pixel_clip(flow_u=50.0)  # m = 50 / 100 = 0.5
    spec = LossSpec((0,), (1,))
    assert loss_geo(clip, spec) == pytest.approx(0.5, rel=1e-6)


def test_loss_normalization_invariant_to_offset_count():
    clip = single_pixel_clip(flow_u=50.0)
    one = loss_geo(clip, LossSpec((0,), (1,)))
    # the (0, -1) pair does not exist; use center 1 with symmetric flows
    both = loss_geo(clip, LossSpec((1,), (-1,)))
    assert both == pytest.approx(one, rel=1e-6)
    two = loss_geo(single_two_center(), LossSpec((0, 1), (1,)))
    assert two == pytest.approx(one, rel=1e-6)


def single_two_center():
    clip = single_pixel_clip(flow_u=50.0)
    clip.geometries[2] = clip.geometries[0]
    clip.flows[(1, 2)] = clip.flows[(0, 1)]
    return clip


def test_loss_missing_pair_raises():
    clip = single_pixel_clip(flow_u=1.0)
    with pytest.raises(MissingInputError):
        loss_geo(clip, LossSpec((0,), (2,)))


def test_loss_spec_rejects_zero_offset():
    with pytest.raises(DomainError):
        LossSpec((0,), (0,))


def test_zero_fused_map_gives_zero_gradients(small_rigid_clip):
    # build a pair whose flow exactly matches the rigid flow: fused is at its
    # minimum and the chosen subgradient is zero
    clip = single_pixel_clip(flow_u=0.0)
    grad = loss_geo_backward(clip, LossSpec((0,), (1,)))
    assert grad.loss == 0.0
    assert not grad.d_flow[(0, 1)].data.any()
    assert not grad.d_depth[0].data.any()
    assert not grad.d_depth[1].data.any()


def test_single_pixel_flow_gradient_hand_value():
    fx = 100.0
    clip = single_pixel_clip(flow_u=0.5, fx=fx)
    grad = loss_geo_backward(clip, LossSpec((0,), (1,)))
    # fused = |du| / fx, so d(loss)/d(flow_u) = 1 / fx for the single pair
    assert grad.d_flow[(0, 1)].data[0, 0, 0] == pytest.approx(1.0 / fx, rel=1e-6)
    assert grad.d_flow[(0, 1)].data[0, 0, 1] == pytest.approx(0.0, abs=1e-12)
    fd = fd_flow_gradient(snapshot_clip(clip, LossSpec((0,), (1,))), LossSpec((0,), (1,)), 0.02,
                          (0, 1), (0, 0), 0, 1e-3)
    assert fd == pytest.approx(1.0 / fx, rel=1e-4)


def test_gradient_matches_finite_differences_on_smooth_fixtures():
    worst = 0.0
    for seed, kind in [(0, "lateral"), (1, "orbit"), (2, "dolly")]:
        clip = perturbed_pair_clip(seed, kind)
        spec = LossSpec((1,), (1,))
        grad = loss_geo_backward(clip, spec)
        checks = sample_gradient_checks(
            snapshot_clip(clip, spec), spec, 0.02, grad, np.random.default_rng(seed), n_samples=20
        )
        assert len(checks) >= 10
        kinds = {c.kind for c in checks}
        assert kinds == {"flow", "depth"}
        fd = np.array([c.fd for c in checks])
        an = np.array([c.analytic for c in checks])
        scale = max(np.percentile(np.abs(fd), 99), 1e-30)
        rel = np.abs(an - fd) / np.maximum(np.abs(fd), scale)
        worst = max(worst, float(rel.max()))
    assert worst <= 1e-4


def test_multi_pair_gradients_are_normalized_sums():
    clip = perturbed_pair_clip(3)
    single = loss_geo_backward(clip, LossSpec((1,), (1,)))
    other = loss_geo_backward(clip, LossSpec((1,), (-1,)))
    both = loss_geo_backward(clip, LossSpec((1,), (1, -1)))
    np.testing.assert_allclose(
        both.d_flow[(1, 2)].data, single.d_flow[(1, 2)].data * 0.5, rtol=1e-5, atol=1e-12
    )
    np.testing.assert_allclose(
        both.loss, 0.5 * (single.loss + other.loss), rtol=1e-12
    )
    expected_depth1 = 0.5 * (
        single.d_depth[1].data.astype(np.float64) + other.d_depth[1].data.astype(np.float64)
    )
    # gradients are emitted as float32; the sum of two rounded halves can
    # differ from the rounded sum at the last-ulp level
    np.testing.assert_allclose(both.d_depth[1].data, expected_depth1, rtol=1e-3, atol=1e-8)


def test_gradient_step_decreases_loss():
    clip = perturbed_pair_clip(4)
    spec = LossSpec((1,), (1,))
    grad = loss_geo_backward(clip, spec)
    base = grad.loss
    flow = clip.flows[(1, 2)]
    g = grad.d_flow[(1, 2)].data.astype(np.float64)
    eta = 1.0
    for _ in range(40):
        stepped = flow.data.astype(np.float64) - eta * g
        clip.flows[(1, 2)] = Raster2D(data=stepped.astype(np.float32), mask=flow.mask)
        new_loss = loss_geo(clip, spec)
        if new_loss < base:
            break
        eta *= 0.5
    else:
        pytest.fail("no step size decreased the loss")
    assert new_loss < base


def test_loss_agrees_with_pair_map_sum(small_rigid_clip):
    clip = perturbed_pair_clip(5)
    spec = LossSpec((1,), (1,))
    maps = compute_pair_maps(
        clip.geometry(1), clip.geometry(2), clip.pose_between(1, 2), clip.flow(1, 2)
    )
    expected = float(maps.fused.plane().astype(np.float64)[maps.fused.valid_mask()].sum())
    assert loss_geo(clip, spec) == pytest.approx(expected, rel=1e-4)


def test_pixel_mean_flag_scales_by_valid_count():
    clip = perturbed_pair_clip(6)
    spec_sum = LossSpec((1,), (1,))
    spec_mean = LossSpec((1,), (1,), pixel_mean=True)
    total = loss_geo(clip, spec_sum)
    mean = loss_geo(clip, spec_mean)
    maps = compute_pair_maps(
        clip.geometry(1), clip.geometry(2), clip.pose_between(1, 2), clip.flow(1, 2)
    )
    count = int(maps.fused.valid_mask().sum())
    assert mean == pytest.approx(total / count, rel=1e-6)
