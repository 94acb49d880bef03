"""Dense optical flow and heatmap warping.

Flow fields follow the forward-displacement convention: content at pixel p
in the earlier frame appears at p + flow(p) in the later frame. Warping a
later frame's heatmap by that flow (backward sampling at p + flow(p))
therefore aligns it to the earlier frame.

The estimator is Horn-Schunck with a fixed 3-level coarse-to-fine pyramid:
brightness constancy plus a smoothness penalty, solved by the classical
Jacobi iteration with a fixed iteration count, so results are fully
deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .tensor import Tensor

__all__ = [
    "FlowField",
    "bilinear_sample",
    "FlowParams",
    "estimate_flow",
    "warp_heatmap",
    "downsample_flow",
    "read_flo",
    "write_flo",
]

FLO_MAGIC = 202021.25

# Rec.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class FlowField:
    """Per-pixel displacement (u right, v down) between two frame indices."""

    u: np.ndarray
    v: np.ndarray
    from_frame: int = 0
    to_frame: int = 0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"u and v must be equal-shape 2-D arrays, got {self.u.shape} vs {self.v.shape}")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ValueError("flow components must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @classmethod
    def zero(cls, h: int, w: int, from_frame: int = 0, to_frame: int = 0) -> "FlowField":
        return cls(np.zeros((h, w)), np.zeros((h, w)), from_frame, to_frame)


@dataclass(frozen=True)
class FlowParams:
    smoothness: float = 0.1  # weight of the smoothness term
    iterations: int = 200  # Jacobi sweeps per pyramid level
    levels: int = 3


def _to_gray(frame: Tensor) -> np.ndarray:
    data = frame.data
    if data.shape[0] != 1:
        raise ValueError(f"flow estimation expects single frames, batch is {data.shape[0]}")
    if data.shape[1] == 1:
        return data[0, 0]
    if data.shape[1] == 3:
        return np.tensordot(_LUMA, data[0], axes=(0, 0))
    raise ValueError(f"expected 1 or 3 channels, got {data.shape[1]}")


def _neighbor_average(f: np.ndarray) -> np.ndarray:
    """Horn-Schunck weighted neighborhood mean with replicated borders."""
    p = np.pad(f, 1, mode="edge")
    return (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]) / 6.0 + (
        p[:-2, :-2] + p[:-2, 2:] + p[2:, :-2] + p[2:, 2:]
    ) / 12.0


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    return img[: h2 * 2, : w2 * 2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray, edge: bool) -> np.ndarray:
    """Sample img at float coordinates; edge=True clamps, else zero padding."""
    h, w = img.shape[-2:]
    if edge:
        sy = np.clip(sy, 0.0, h - 1.0)
        sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    fy = sy - y0
    fx = sx - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1
    if edge:
        y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y1, 0, h - 1)
        x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x1, 0, w - 1)
        v00, v01 = img[..., y0c, x0c], img[..., y0c, x1c]
        v10, v11 = img[..., y1c, x0c], img[..., y1c, x1c]
    else:
        def fetch(yy, xx):
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = img[..., np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            return vals * ok

        v00, v01 = fetch(y0, x0), fetch(y0, x1)
        v10, v11 = fetch(y1, x0), fetch(y1, x1)
    return (
        v00 * (1.0 - fy) * (1.0 - fx)
        + v01 * (1.0 - fy) * fx
        + v10 * fy * (1.0 - fx)
        + v11 * fy * fx
    )


def _warp_image(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return bilinear_sample(img, yy + v, xx + u, edge=True)


def _hs_level(a: np.ndarray, b: np.ndarray, u: np.ndarray, v: np.ndarray, params: FlowParams):
    """Refine flow (u, v) so that a(p) ~ b(p + flow) on one pyramid level."""
    bw = _warp_image(b, u, v)
    gy_a, gx_a = np.gradient(a)
    gy_b, gx_b = np.gradient(bw)
    ix = 0.5 * (gx_a + gx_b)
    iy = 0.5 * (gy_a + gy_b)
    it = bw - a
    du = np.zeros_like(u)
    dv = np.zeros_like(v)
    denom = params.smoothness + ix * ix + iy * iy
    for _ in range(params.iterations):
        du_bar = _neighbor_average(du)
        dv_bar = _neighbor_average(dv)
        common = (ix * du_bar + iy * dv_bar + it) / denom
        du = du_bar - ix * common
        dv = dv_bar - iy * common
    return u + du, v + dv


def estimate_flow(
    frame_a: Tensor,
    frame_b: Tensor,
    params: FlowParams = FlowParams(),
    from_frame: int = 0,
    to_frame: int = 0,
) -> FlowField:
    """Dense flow such that frame_a(p) ~ frame_b(p + flow(p)).

    Color input is converted to luma internally. Deterministic: fixed
    pyramid depth and iteration count, no data-dependent branching.
    """
    if frame_a.shape != frame_b.shape:
        raise ValueError(f"frame sizes differ: {frame_a.shape} vs {frame_b.shape}")
    a = _to_gray(frame_a)
    b = _to_gray(frame_b)

    pyr_a, pyr_b = [a], [b]
    for _ in range(params.levels - 1):
        if min(pyr_a[-1].shape) < 8:
            break
        pyr_a.append(_halve(pyr_a[-1]))
        pyr_b.append(_halve(pyr_b[-1]))

    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    for level in range(len(pyr_a) - 1, -1, -1):
        if u.shape != pyr_a[level].shape:
            h, w = pyr_a[level].shape
            yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
            sy = (yy + 0.5) / 2.0 - 0.5
            sx = (xx + 0.5) / 2.0 - 0.5
            u = bilinear_sample(u, sy, sx, edge=True) * 2.0
            v = bilinear_sample(v, sy, sx, edge=True) * 2.0
        u, v = _hs_level(pyr_a[level], pyr_b[level], u, v, params)
    return FlowField(u, v, from_frame, to_frame)


def warp_heatmap(source: Tensor, flow: FlowField) -> Tensor:
    """Align a later frame's stack to the flow's reference frame.

    out(p) = bilinear-sample(source, p + flow(p)) per channel; samples that
    fall outside the source contribute zero confidence. Exact identity for
    zero flow.
    """
    B, C, H, W = source.shape
    if flow.shape != (H, W):
        raise ValueError(f"flow resolution {flow.shape} does not match heatmap {H}x{W}")
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    out = bilinear_sample(source.data, yy + flow.v, xx + flow.u, edge=False)
    return Tensor(out)


def downsample_flow(flow: FlowField, factor: int) -> FlowField:
    """Average-pool a flow field by an integer factor, rescaling displacements."""
    h, w = flow.shape
    if h % factor or w % factor:
        raise ValueError(f"flow size {h}x{w} not divisible by {factor}")
    u = flow.u.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3)) / factor
    v = flow.v.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3)) / factor
    return FlowField(u, v, flow.from_frame, flow.to_frame)


# ---------------------------------------------------------------------------
# Middlebury .flo interchange: float32-LE magic 202021.25, int32 width,
# int32 height, then row-major interleaved (u, v) float32 pairs.


def write_flo(flow: FlowField, path):
    h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        inter = np.empty((h, w, 2), dtype="<f4")
        inter[..., 0] = flow.u
        inter[..., 1] = flow.v
        fh.write(inter.tobytes())


def read_flo(path, from_frame: int = 0, to_frame: int = 0) -> FlowField:
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError(f"{path}: truncated flow header")
        magic, w, h = struct.unpack("<fii", header)
        if magic != FLO_MAGIC:
            raise FormatError(f"{path}: bad flow magic {magic!r}")
        if w <= 0 or h <= 0:
            raise FormatError(f"{path}: invalid flow dimensions {w}x{h}")
        payload = fh.read(h * w * 2 * 4)
        if len(payload) != h * w * 2 * 4:
            raise FormatError(f"{path}: truncated flow payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after flow payload")
        inter = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    return FlowField(inter[..., 0].astype(np.float64), inter[..., 1].astype(np.float64), from_frame, to_frame)
