"""Joint heatmaps: target synthesis, decoding and coordinate mapping.

A pose is a set of k joints in input-pixel coordinates. The network
regresses one heatmap channel per joint at 1/scale resolution; targets are
Gaussians centered on the joint, and predictions decode by per-channel
argmax.

Coordinate convention: pixel (r, c) covers the square [r-0.5, r+0.5) x
[c-0.5, c+0.5) with its center at (r, c). Mapping between resolutions uses
u = (x + 0.5) / scale - 0.5, whose exact inverse is x = (u + 0.5) * scale
- 0.5; this keeps round trips input -> heatmap -> input unbiased (no
systematic drift toward a corner) and reduces to the identity at scale 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Tensor

__all__ = [
    "JOINT_NAMES",
    "FLIP_PAIRS",
    "DEFAULT_SIGMA",
    "Pose",
    "coords_to_heatmap",
    "heatmap_to_coords",
    "synthesize_target",
    "decode_argmax",
    "decode_argmax_batch",
]

JOINT_NAMES = (
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
)

# channel pairs that exchange identity under a horizontal flip
FLIP_PAIRS = ((1, 2), (3, 4), (5, 6))

DEFAULT_SIGMA = 1.5


@dataclass
class Pose:
    """Joint locations in input-pixel space with visibility and optional confidence."""

    coords: np.ndarray  # (k, 2) float64, columns (x, y)
    visible: np.ndarray = None  # (k,) bool, defaults to all visible
    confidence: Optional[np.ndarray] = field(default=None)  # (k,) float64

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"coords must be (k,2), got {self.coords.shape}")
        k = self.coords.shape[0]
        if self.visible is None:
            self.visible = np.ones(k, dtype=bool)
        else:
            self.visible = np.asarray(self.visible, dtype=bool)
        if self.visible.shape != (k,):
            raise ValueError("visible must have one flag per joint")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64)
            if self.confidence.shape != (k,):
                raise ValueError("confidence must have one value per joint")

    @property
    def k(self) -> int:
        return self.coords.shape[0]

    def copy(self) -> "Pose":
        conf = None if self.confidence is None else self.confidence.copy()
        return Pose(self.coords.copy(), self.visible.copy(), conf)


def coords_to_heatmap(xy: np.ndarray, scale: int) -> np.ndarray:
    """Map input-pixel coordinates to heatmap coordinates."""
    return (np.asarray(xy, dtype=np.float64) + 0.5) / scale - 0.5


def heatmap_to_coords(uv: np.ndarray, scale: int) -> np.ndarray:
    """Map heatmap coordinates back to input-pixel coordinates."""
    return (np.asarray(uv, dtype=np.float64) + 0.5) * scale - 0.5


def in_frame(coords: np.ndarray, frame_h: int, frame_w: int) -> np.ndarray:
    """True where (x, y) falls inside the frame's pixel coverage area."""
    xy = np.asarray(coords, dtype=np.float64)
    x, y = xy[..., 0], xy[..., 1]
    return (x >= -0.5) & (x < frame_w - 0.5) & (y >= -0.5) & (y < frame_h - 0.5)


def synthesize_target(
    pose: Pose,
    size: tuple[int, int],
    scale: int,
    sigma: float = DEFAULT_SIGMA,
) -> tuple[Tensor, np.ndarray]:
    """Build the (1, k, Hm, Wm) Gaussian target and its (1, k, 1, 1) loss mask.

    Each visible in-frame joint gets a Gaussian of amplitude 1/(2 pi sigma^2)
    centered on its heatmap-space location, sampled at pixel centers. Joints
    that are invisible or fall outside the frame produce an all-zero channel
    and a zero mask entry so they can be excluded from the loss.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    heatmap_h, heatmap_w = size
    k = pose.k
    frame_h, frame_w = heatmap_h * scale, heatmap_w * scale
    target = np.zeros((1, k, heatmap_h, heatmap_w))
    ok = pose.visible & in_frame(pose.coords, frame_h, frame_w)
    amp = 1.0 / (2.0 * np.pi * sigma * sigma)
    rows = np.arange(heatmap_h)[:, None]
    cols = np.arange(heatmap_w)[None, :]
    uv = coords_to_heatmap(pose.coords, scale)
    for c in range(k):
        if not ok[c]:
            continue
        u, v = uv[c]
        d2 = (cols - u) ** 2 + (rows - v) ** 2
        target[0, c] = amp * np.exp(-d2 / (2.0 * sigma * sigma))
    mask = ok.astype(np.float64).reshape(1, k, 1, 1)
    return Tensor(target), mask


def decode_argmax_batch(heatmap: Tensor, scale: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized decode: (B, k, 2) input-space coordinates and (B, k) peak values.

    Ties resolve to the smallest row-major index.
    """
    data = heatmap.data
    B, k, H, W = data.shape
    flat = data.reshape(B, k, H * W)
    idx = flat.argmax(axis=-1)
    peaks = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    rows, cols = np.divmod(idx, W)
    coords = np.stack([cols, rows], axis=-1).astype(np.float64)
    return heatmap_to_coords(coords, scale), peaks


def decode_argmax(heatmap: Tensor, scale: int) -> Pose:
    """Per-channel argmax of a single (1, k, Hm, Wm) stack, as a Pose.

    Confidence is the peak value of each channel.
    """
    if heatmap.shape[0] != 1:
        raise ValueError(f"decode_argmax expects a single stack, batch is {heatmap.shape[0]}")
    coords, peaks = decode_argmax_batch(heatmap, scale)
    return Pose(coords[0], np.ones(heatmap.shape[1], dtype=bool), peaks[0])
