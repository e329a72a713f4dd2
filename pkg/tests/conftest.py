"""Shared fixture builders for the test suite."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from vidgeom import scene_synth as ss
from vidgeom.consistency_metric import MemoryClip
from vidgeom.tensor_io import Raster2D


def perturbed_pair_clip(seed: int, kind: str = "lateral", width: int = 96, height: int = 72,
                        flow_amp: float = 0.6, depth_bias: float = 0.006,
                        depth_amp: float = 0.003) -> MemoryClip:
    """A rigid 4-frame clip with a smooth flow bump and a smooth multiplicative
    depth perturbation on frame 2, for gradient checking of the (1, 2) pair.

    The depth bias keeps the structure residual bounded away from its
    absolute-value kink everywhere while staying inside the co-visibility
    threshold.
    """
    rng = np.random.default_rng(seed)
    spec = ss.preset_scene(kind, width, height, 4, 8.0, rng, speed=0.8)
    clip = ss.generate_rigid_clip(spec, flow_offsets=(-1, 1))

    uu, vv = np.meshgrid(np.arange(width), np.arange(height))
    px = rng.uniform(0.5, 2.5, 4)
    fl = clip.flows[(1, 2)]
    fd = fl.data.astype(np.float64)
    fd[:, :, 0] += flow_amp * np.sin(2 * np.pi * px[0] * uu / width) * np.cos(2 * np.pi * px[1] * vv / height)
    fd[:, :, 1] += 0.7 * flow_amp * np.cos(2 * np.pi * px[2] * uu / width)
    clip.flows[(1, 2)] = Raster2D(data=fd.astype(np.float32), mask=fl.mask)

    g2 = clip.geometries[2]
    factor = 1.0 + depth_bias + depth_amp * np.sin(2 * np.pi * px[3] * vv / height) * np.cos(2 * np.pi * uu / width)
    dep = g2.depth.plane().astype(np.float64) * factor
    clip.geometries[2] = replace(g2, depth=Raster2D(data=dep.astype(np.float32), mask=g2.depth.mask))
    return clip


def scale_clip(clip: MemoryClip, lam: float) -> MemoryClip:
    """Multiply every depth raster and every pose translation by lam.

    Scaled depths are kept in float64 so the comparison probes the metric's
    invariance rather than float32 re-quantization of the inputs.
    """
    geoms = {}
    for t, g in clip.geometries.items():
        pose = g.pose.copy()
        pose[:, 3] *= lam
        dep = g.depth.plane().astype(np.float64) * lam
        geoms[t] = replace(g, depth=Raster2D(data=dep, mask=g.depth.mask), pose=pose)
    return MemoryClip(clip_id=clip.clip_id, fps=clip.fps, geometries=geoms, flows=dict(clip.flows),
                      ground_truth=dict(clip.ground_truth))


@pytest.fixture(scope="session")
def small_rigid_clip() -> MemoryClip:
    rng = np.random.default_rng(7)
    spec = ss.preset_scene("lateral", 96, 72, 6, 8.0, rng, speed=0.8)
    return ss.generate_rigid_clip(spec, flow_offsets=(-2, -1, 1, 2))
