"""Pluggable estimator backends.

A geometry backend turns a frame stack into per-frame depth, intrinsics,
and world-from-camera poses; a flow backend produces dense pixel
displacement for ordered frame pairs.  Backends are addressed by
"module.path:attribute" strings so real model wrappers can live anywhere;
the mocks below are deterministic and weight-free, and CI uses only them.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass

import numpy as np


@dataclass
class GeometryResult:
    depths: np.ndarray  # (N, H, W) float32, positive
    intrinsics: np.ndarray  # (N, 4): fx, fy, cx, cy
    poses: np.ndarray  # (N, 3, 4) world-from-camera


class BackendError(Exception):
    pass


def load_backend(spec: str):
    """Instantiate a backend from a 'module.path:Attribute' spec string."""
    if ":" not in spec:
        raise BackendError(f"backend spec '{spec}' must look like 'package.module:Name'")
    module_name, attr = spec.split(":", 1)
    try:
        module = importlib.import_module(module_name)
        factory = getattr(module, attr)
    except (ImportError, AttributeError) as exc:
        raise BackendError(f"cannot resolve backend '{spec}': {exc}") from exc
    return factory()


class ConstantGeometry:
    """Depth 1 everywhere, centered intrinsics, identity poses."""

    depth_value = 1.0

    def infer(self, frames: np.ndarray) -> GeometryResult:
        n, h, w = frames.shape[:3]
        focal = 0.9 * w
        intr = np.tile([focal, focal, (w - 1) / 2.0, (h - 1) / 2.0], (n, 1))
        poses = np.tile(np.hstack([np.eye(3), np.zeros((3, 1))]), (n, 1, 1))
        depths = np.full((n, h, w), self.depth_value, dtype=np.float32)
        return GeometryResult(depths=depths, intrinsics=intr, poses=poses)


class BadRotationGeometry(ConstantGeometry):
    """Emits a reflection in frame 0's rotation; must be rejected."""

    def infer(self, frames: np.ndarray) -> GeometryResult:
        out = super().infer(frames)
        out.poses[0, :, :3] = np.diag([1.0, 1.0, -1.0])
        return out


class ZeroFlow:
    """All-zero displacement with a full validity mask."""

    def infer_pair(self, frame_a: np.ndarray, frame_b: np.ndarray) -> np.ndarray:
        h, w = frame_a.shape[:2]
        return np.zeros((h, w, 2), dtype=np.float32)


class FailingFlow:
    """Always raises; exercises the backend-failure path."""

    def infer_pair(self, frame_a, frame_b):
        raise RuntimeError("mock flow backend failure")
