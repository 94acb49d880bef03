"""Accuracy-vs-distance evaluation and curve emission.

A joint counts as correct when its Euclidean error is <= d, with d measured
in input-image pixels (inclusive comparison). Joints marked invisible in
the ground truth are excluded from both numerator and denominator. Curves
are emitted as CSV (method, joint, d, accuracy) plus a self-contained SVG
plot; both are deterministic byte-for-byte for identical inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .heatmap import JOINT_NAMES, Pose

__all__ = ["PckCurve", "pck", "fraction_within", "average_joints", "emit_curves"]


@dataclass
class PckCurve:
    d_values: np.ndarray  # ascending, input pixels
    accuracy: np.ndarray  # (k, len(d_values)), fractions in [0, 1]
    frame_count: int
    joint_names: tuple[str, ...]

    def __post_init__(self):
        self.d_values = np.asarray(self.d_values, dtype=np.float64)
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)
        if self.accuracy.shape != (len(self.joint_names), len(self.d_values)):
            raise ValueError(
                f"accuracy shape {self.accuracy.shape} does not match "
                f"{len(self.joint_names)} joints x {len(self.d_values)} distances"
            )

    @property
    def k(self) -> int:
        return len(self.joint_names)


def _default_names(k: int) -> tuple[str, ...]:
    if k == len(JOINT_NAMES):
        return JOINT_NAMES
    return tuple(f"joint{i}" for i in range(k))


def pck(
    predictions: Sequence[Pose],
    ground_truth: Sequence[Pose],
    d_values: Sequence[float],
    joint_names: Sequence[str] = (),
) -> PckCurve:
    """Per-joint fraction of frames with error <= d, over visible joints.

    Joints that are never visible get accuracy nan (no defined denominator).
    """
    if len(predictions) != len(ground_truth):
        raise ValueError(f"{len(predictions)} predictions vs {len(ground_truth)} labels")
    if not predictions:
        raise ValueError("need at least one frame")
    d = np.asarray(list(d_values), dtype=np.float64)
    if d.ndim != 1 or len(d) == 0 or np.any(np.diff(d) < 0):
        raise ValueError("d_values must be a non-empty ascending sequence")
    k = ground_truth[0].k
    err = np.empty((len(predictions), k))
    vis = np.empty((len(predictions), k), dtype=bool)
    for i, (p, g) in enumerate(zip(predictions, ground_truth)):
        if p.k != k or g.k != k:
            raise ValueError("inconsistent joint counts")
        err[i] = np.linalg.norm(p.coords - g.coords, axis=1)
        vis[i] = g.visible
    counts = vis.sum(axis=0).astype(np.float64)  # (k,)
    hits = (err[:, :, None] <= d[None, None, :]) & vis[:, :, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = hits.sum(axis=0) / counts[:, None]
    names = tuple(joint_names) if joint_names else _default_names(k)
    if len(names) != k:
        raise ValueError(f"{len(names)} joint names for {k} joints")
    return PckCurve(d, acc, len(predictions), names)


def fraction_within(predictions: Sequence[Pose], ground_truth: Sequence[Pose], d: float) -> float:
    """Overall fraction of visible joints with error <= d, pooled over frames."""
    if len(predictions) != len(ground_truth):
        raise ValueError(f"{len(predictions)} predictions vs {len(ground_truth)} labels")
    hits = 0
    total = 0
    for p, g in zip(predictions, ground_truth):
        err = np.linalg.norm(p.coords - g.coords, axis=1)
        hits += int((err[g.visible] <= d).sum())
        total += int(g.visible.sum())
    return hits / total if total else 0.0


def average_joints(curve: PckCurve, joints: Sequence[int], name: str = "average") -> PckCurve:
    """Pointwise mean over the selected joint indices, as a one-joint curve."""
    idx = list(joints)
    if not idx:
        raise ValueError("need at least one joint to average")
    acc = curve.accuracy[idx].mean(axis=0, keepdims=True)
    return PckCurve(curve.d_values.copy(), acc, curve.frame_count, (name,))


# ---------------------------------------------------------------------------
# emission

_PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)

_W, _H = 640, 480
_ML, _MR, _MT, _MB = 60, 20, 20, 50  # plot margins


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def emit_curves(named_curves: Sequence[tuple[str, PckCurve]], out_dir, stem: str = "pck"):
    """Write <stem>.csv and <stem>.svg; returns their paths.

    The CSV holds one row per (method, joint, d). The SVG draws one line per
    method/joint pair with a legend. Byte-identical output for identical
    input.
    """
    if not named_curves:
        raise ValueError("need at least one curve")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    svg_path = out / f"{stem}.svg"

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "joint", "d", "accuracy"])
        for method, curve in named_curves:
            for j, joint in enumerate(curve.joint_names):
                for di, d in enumerate(curve.d_values):
                    writer.writerow([method, joint, _fmt(d), _fmt(curve.accuracy[j, di])])

    svg_path.write_bytes(_render_svg(named_curves).encode("utf-8"))
    return csv_path, svg_path


def _render_svg(named_curves: Sequence[tuple[str, PckCurve]]) -> str:
    d_max = max(float(c.d_values.max()) for _, c in named_curves)
    d_max = d_max if d_max > 0 else 1.0
    px0, px1 = _ML, _W - _MR
    py0, py1 = _H - _MB, _MT  # y axis points up

    def X(d):
        return px0 + (px1 - px0) * (d / d_max)

    def Y(a):
        return py0 + (py1 - py0) * a

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="monospace" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<line x1="{px0}" y1="{py0}" x2="{px1}" y2="{py0}" stroke="black"/>',
        f'<line x1="{px0}" y1="{py0}" x2="{px0}" y2="{py1}" stroke="black"/>',
    ]
    for frac in range(0, 11, 2):
        a = frac / 10.0
        y = Y(a)
        lines.append(f'<line x1="{px0 - 4}" y1="{y:.2f}" x2="{px0}" y2="{y:.2f}" stroke="black"/>')
        lines.append(f'<text x="{px0 - 8}" y="{y + 4:.2f}" text-anchor="end">{a:.1f}</text>')
    for tick in range(5):
        d = d_max * tick / 4.0
        x = X(d)
        lines.append(f'<line x1="{x:.2f}" y1="{py0}" x2="{x:.2f}" y2="{py0 + 4}" stroke="black"/>')
        lines.append(f'<text x="{x:.2f}" y="{py0 + 18}" text-anchor="middle">{d:.3g}</text>')
    lines.append(
        f'<text x="{(px0 + px1) / 2:.2f}" y="{_H - 12}" text-anchor="middle">'
        "distance from ground truth (px)</text>"
    )
    lines.append(
        f'<text x="16" y="{(py0 + py1) / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(py0 + py1) / 2:.2f})">accuracy</text>'
    )

    series = 0
    legend_y = _MT + 14
    for method, curve in named_curves:
        for j, joint in enumerate(curve.joint_names):
            color = _PALETTE[series % len(_PALETTE)]
            pts = " ".join(
                f"{X(float(d)):.2f},{Y(float(a)):.2f}"
                for d, a in zip(curve.d_values, curve.accuracy[j])
                if np.isfinite(a)
            )
            if pts:
                lines.append(
                    f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
                )
            label = f"{method}: {joint}" if curve.k > 1 or len(named_curves) > 1 else method
            lines.append(
                f'<line x1="{px1 - 150}" y1="{legend_y - 4}" x2="{px1 - 130}" '
                f'y2="{legend_y - 4}" stroke="{color}" stroke-width="1.5"/>'
            )
            lines.append(f'<text x="{px1 - 124}" y="{legend_y}">{label}</text>')
            legend_y += 16
            series += 1
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
