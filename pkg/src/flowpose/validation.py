"""Input validation helpers for the estimator API.

The estimators accept friendly array-like inputs (numpy arrays, lists of
arrays, lists of the package's own types) and normalize them to internal
representations, raising ValueError with a usable message otherwise.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from .heatmap import Pose
from .tensor import Tensor

__all__ = ["ensure_frames", "ensure_poses", "check_same_length"]


def ensure_frames(X) -> list[Tensor]:
    """Normalize to a list of (1, C, H, W) float64 tensors.

    Accepts an (N, C, H, W) array, a sequence of (C, H, W) arrays, or a
    sequence of single-frame tensors. All frames must share one shape and
    be finite.
    """
    if isinstance(X, Tensor):
        X = [X]
    if isinstance(X, np.ndarray):
        if X.ndim != 4:
            raise ValueError(f"frame array must be (N, C, H, W), got shape {X.shape}")
        X = list(X)
    frames = []
    for i, item in enumerate(X):
        if isinstance(item, Tensor):
            if item.shape[0] != 1:
                raise ValueError(f"frame {i}: expected batch size 1, got {item.shape[0]}")
            t = item
        else:
            arr = np.asarray(item, dtype=np.float64)
            if arr.ndim != 3:
                raise ValueError(f"frame {i}: expected (C, H, W), got shape {arr.shape}")
            t = Tensor(arr[None])
        if not np.isfinite(t.data).all():
            raise ValueError(f"frame {i}: contains non-finite values")
        frames.append(t)
    if not frames:
        raise ValueError("no frames given")
    shape = frames[0].shape
    for i, t in enumerate(frames):
        if t.shape != shape:
            raise ValueError(f"frame {i}: shape {t.shape} differs from {shape}")
    return frames


def ensure_poses(y, joint_count: int = 0) -> list[Pose]:
    """Normalize to a list of Pose.

    Accepts an (N, k, 2) or (N, k, 3) array (third column = visibility), or
    a sequence of Pose / (k, 2) / (k, 3) arrays. Coordinates must be finite.
    """
    if isinstance(y, np.ndarray):
        if y.ndim != 3 or y.shape[2] not in (2, 3):
            raise ValueError(f"pose array must be (N, k, 2|3), got shape {y.shape}")
        y = list(y)
    poses = []
    for i, item in enumerate(y):
        if isinstance(item, Pose):
            p = item
        else:
            arr = np.asarray(item, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] not in (2, 3):
                raise ValueError(f"pose {i}: expected (k, 2|3), got shape {arr.shape}")
            if arr.shape[1] == 3:
                p = Pose(arr[:, :2], arr[:, 2] > 0.5)
            else:
                p = Pose(arr)
        if not np.isfinite(p.coords).all():
            raise ValueError(f"pose {i}: contains non-finite coordinates")
        poses.append(p)
    if not poses:
        raise ValueError("no poses given")
    k = poses[0].k
    for i, p in enumerate(poses):
        if p.k != k:
            raise ValueError(f"pose {i}: {p.k} joints differ from {k}")
    if joint_count and k != joint_count:
        raise ValueError(f"expected {joint_count} joints, got {k}")
    return poses


def check_same_length(X: Sequence, y: Sequence):
    if len(X) != len(y):
        raise ValueError(f"X and y differ in length: {len(X)} vs {len(y)}")
