"""Synthetic articulated-puppet video with exact ground truth.

A puppet is a kinematic tree of capsule-shaped limbs hanging off a virtual
root. Limb orientations follow smooth bounded-velocity random walks, so
sequences look like gesturing video. Because the generator knows the exact
geometry of every frame it can emit, alongside the frames:

- exact joint positions (the pose labels),
- the exact dense displacement field between any two frames (computed from
  rigid limb correspondence, not estimated),

which makes generated sequences usable as oracles for flow, warping and
training tests.

Frames are (1, 3, H, W) tensors with values in [0, 1]. Pixels are owned by
the topmost limb covering them, otherwise by the drifting background
texture; the true flow moves each pixel with its owner.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .flow import FlowField, write_flo, read_flo
from .heatmap import JOINT_NAMES, Pose
from .tensor import Tensor, save_tensor, load_tensor

__all__ = [
    "JointSpec",
    "PuppetSpec",
    "default_puppet",
    "two_mode_puppet",
    "simulate_states",
    "render_frame",
    "exact_flow",
    "generate_sequence",
    "generate_dataset",
    "add_label_noise",
    "save_dataset",
    "load_dataset",
    "spec_from_json",
]


@dataclass(frozen=True)
class JointSpec:
    """One joint and the limb connecting it to its parent anchor.

    The limb is a capsule from the parent joint (or the virtual root when
    parent is -1) to this joint. ``base_angle`` is the limb's rest
    orientation in radians (0 points right, pi/2 points down); the motion
    model is a random walk on the angle, reflected at base +- amplitude,
    with per-frame angular velocity capped at max_step.
    """

    name: str
    parent: int
    length: float
    thickness: float
    color: tuple[float, float, float]
    base_angle: float
    amplitude: float = 0.0
    max_step: float = 0.0


@dataclass(frozen=True)
class PuppetSpec:
    joints: tuple[JointSpec, ...]
    frame_h: int = 64
    frame_w: int = 64
    root: tuple[float, float] = (32.0, 24.0)  # (x, y)
    draw_order: tuple[int, ...] = ()  # rendering order, later entries on top
    background_drift: tuple[float, float] = (0.0, 0.0)  # pixels per frame
    texture_cells: int = 6
    texture_range: tuple[float, float] = (0.25, 0.55)
    noise_level: float = 0.0
    root_sway: tuple[float, float] = (0.0, 0.0)  # max |root offset| (x, y), pixels

    def __post_init__(self):
        if not self.joints:
            raise ConfigError("puppet needs at least one joint")
        if self.root_sway[0] < 0 or self.root_sway[1] < 0:
            raise ConfigError("root_sway must be non-negative")
        for i, j in enumerate(self.joints):
            if not -1 <= j.parent < i:
                raise ConfigError(
                    f"joint {j.name!r}: parent index {j.parent} must be -1 or an earlier joint"
                )
            if j.length <= 0 or j.thickness <= 0:
                raise ConfigError(f"joint {j.name!r}: length and thickness must be positive")
            if j.amplitude < 0 or j.max_step < 0:
                raise ConfigError(f"joint {j.name!r}: amplitude and max_step must be non-negative")
        if not self.draw_order:
            object.__setattr__(self, "draw_order", tuple(range(len(self.joints))))
        if sorted(self.draw_order) != list(range(len(self.joints))):
            raise ConfigError("draw_order must be a permutation of the joint indices")
        self._check_reach()

    @property
    def k(self) -> int:
        return len(self.joints)

    def _check_reach(self):
        """Interval-arithmetic bound: every joint stays inside the frame."""
        margin = max(j.thickness for j in self.joints) + 1.0
        sx, sy = self.root_sway
        rx = (self.root[0] - sx, self.root[0] + sx)
        ry = (self.root[1] - sy, self.root[1] + sy)
        boxes = {}
        for i, j in enumerate(self.joints):
            px = rx if j.parent < 0 else boxes[j.parent][0]
            py = ry if j.parent < 0 else boxes[j.parent][1]
            lo, hi = j.base_angle - j.amplitude, j.base_angle + j.amplitude
            cx = _trig_range(math.cos, lo, hi)
            cy = _trig_range(math.sin, lo, hi)
            bx = (px[0] + j.length * cx[0], px[1] + j.length * cx[1])
            by = (py[0] + j.length * cy[0], py[1] + j.length * cy[1])
            boxes[i] = (bx, by)
            if bx[0] < margin or bx[1] > self.frame_w - 1 - margin:
                raise ConfigError(f"joint {j.name!r} can leave the frame horizontally ({bx})")
            if by[0] < margin or by[1] > self.frame_h - 1 - margin:
                raise ConfigError(f"joint {j.name!r} can leave the frame vertically ({by})")


def _trig_range(fn, lo: float, hi: float) -> tuple[float, float]:
    """Exact (min, max) of cos or sin over the angle interval [lo, hi]."""
    vals = [fn(lo), fn(hi)]
    # include every critical point k*pi/2 inside the interval
    k = math.ceil(lo / (math.pi / 2))
    while k * math.pi / 2 <= hi:
        vals.append(fn(k * math.pi / 2))
        k += 1
    return min(vals), max(vals)


def default_puppet(
    noise_level: float = 0.0,
    background_drift: tuple[float, float] = (0.0, 0.0),
    root_sway: tuple[float, float] = (0.0, 0.0),
) -> PuppetSpec:
    """Seven-joint upper-body puppet with per-limb distinct colors.

    Joint order matches heatmap.JOINT_NAMES.
    """
    joints = (
        JointSpec("head", -1, 7.0, 2.8, (0.95, 0.80, 0.30), -math.pi / 2, 0.20, 0.06),
        JointSpec("left_shoulder", -1, 8.0, 2.2, (0.20, 0.55, 0.95), math.pi, 0.08, 0.03),
        JointSpec("right_shoulder", -1, 8.0, 2.2, (0.95, 0.30, 0.25), 0.0, 0.08, 0.03),
        JointSpec("left_elbow", 1, 9.0, 1.9, (0.25, 0.85, 0.55), math.pi / 2, 0.90, 0.22),
        JointSpec("right_elbow", 2, 9.0, 1.9, (0.85, 0.45, 0.85), math.pi / 2, 0.90, 0.22),
        JointSpec("left_wrist", 3, 8.0, 1.6, (0.30, 0.90, 0.90), math.pi / 2, 1.20, 0.30),
        JointSpec("right_wrist", 4, 8.0, 1.6, (0.95, 0.65, 0.10), math.pi / 2, 1.20, 0.30),
    )
    assert tuple(j.name for j in joints) == JOINT_NAMES
    return PuppetSpec(
        joints=joints,
        draw_order=(1, 2, 0, 3, 4, 5, 6),
        background_drift=background_drift,
        noise_level=noise_level,
        root_sway=root_sway,
    )


def two_mode_puppet(noise_level: float = 0.0) -> PuppetSpec:
    """Variant whose left and right arms share identical colors.

    Appearance alone cannot tell the two wrists apart, so early in training
    both wrist channels tend to fire at both arms (a two-mode task).
    """
    base = default_puppet(noise_level=noise_level)
    joints = list(base.joints)
    for left, right in ((1, 2), (3, 4), (5, 6)):
        joints[right] = replace(joints[right], color=joints[left].color)
    return replace(base, joints=tuple(joints))


# ---------------------------------------------------------------------------
# simulation


@dataclass
class PuppetState:
    """Geometry of one frame: joint positions, background phase, root position."""

    joint_xy: np.ndarray  # (k, 2) float64
    bg_offset: np.ndarray  # (2,) accumulated background translation (x, y)
    root_xy: Optional[np.ndarray] = None  # (2,); None means the spec's static root


def _state_root(spec: PuppetSpec, state: PuppetState) -> np.ndarray:
    return np.asarray(spec.root) if state.root_xy is None else state.root_xy


def _positions(spec: PuppetSpec, angles: np.ndarray, root: Optional[np.ndarray] = None) -> np.ndarray:
    if root is None:
        root = np.asarray(spec.root)
    xy = np.empty((spec.k, 2))
    for i, j in enumerate(spec.joints):
        anchor = root if j.parent < 0 else xy[j.parent]
        xy[i] = anchor + j.length * np.array([math.cos(angles[i]), math.sin(angles[i])])
    return xy


def simulate_states(spec: PuppetSpec, length: int, rng: np.random.Generator) -> list[PuppetState]:
    """Run the angular random walks for ``length`` frames."""
    if length < 1:
        raise ValueError("length must be >= 1")
    k = spec.k
    base = np.array([j.base_angle for j in spec.joints])
    amp = np.array([j.amplitude for j in spec.joints])
    step = np.array([j.max_step for j in spec.joints])
    angles = base + rng.uniform(-0.5, 0.5, size=k) * amp
    omega = np.zeros(k)
    drift = np.asarray(spec.background_drift, dtype=np.float64)
    sway = np.asarray(spec.root_sway, dtype=np.float64)
    root0 = np.asarray(spec.root, dtype=np.float64)
    root_off = np.zeros(2)
    root_vel = np.zeros(2)

    states = []
    for t in range(length):
        root = root0 + root_off
        states.append(PuppetState(_positions(spec, angles, root), drift * t, root))
        omega = np.clip(0.8 * omega + rng.uniform(-1.0, 1.0, size=k) * step * 0.6, -step, step)
        angles = angles + omega
        # reflect at the allowed band so angles stay within base +- amplitude
        lo, hi = base - amp, base + amp
        over = angles > hi
        under = angles < lo
        angles = np.where(over, 2 * hi - angles, angles)
        angles = np.where(under, 2 * lo - angles, angles)
        omega = np.where(over | under, -omega, omega)
        if sway.any():
            # same damped-walk scheme as the angles; rng drawn only when
            # sway is enabled so sway-free streams stay byte-stable
            cap = sway * 0.35
            root_vel = np.clip(0.8 * root_vel + rng.uniform(-1.0, 1.0, size=2) * sway * 0.2, -cap, cap)
            root_off = root_off + root_vel
            over_r = root_off > sway
            under_r = root_off < -sway
            root_off = np.where(over_r, 2 * sway - root_off, root_off)
            root_off = np.where(under_r, -2 * sway - root_off, root_off)
            root_vel = np.where(over_r | under_r, -root_vel, root_vel)
    return states


# ---------------------------------------------------------------------------
# rendering


def _make_texture(spec: PuppetSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.texture_range
    return rng.uniform(lo, hi, size=(3, spec.texture_cells, spec.texture_cells))


def _sample_texture(texture: np.ndarray, spec: PuppetSpec, offset: np.ndarray) -> np.ndarray:
    """Bilinear wraparound sample of the texture grid translated by offset."""
    _, ch, cw = texture.shape
    h, w = spec.frame_h, spec.frame_w
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # background content moves by +offset, so sample the static grid at p - offset
    gy = (yy - offset[1]) * ch / h
    gx = (xx - offset[0]) * cw / w
    y0 = np.floor(gy).astype(np.int64)
    x0 = np.floor(gx).astype(np.int64)
    fy, fx = gy - y0, gx - x0
    y0 %= ch
    x0 %= cw
    y1 = (y0 + 1) % ch
    x1 = (x0 + 1) % cw
    return (
        texture[:, y0, x0] * (1 - fy) * (1 - fx)
        + texture[:, y0, x1] * (1 - fy) * fx
        + texture[:, y1, x0] * fy * (1 - fx)
        + texture[:, y1, x1] * fy * fx
    )


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    t = ((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom
    t = np.clip(t, 0.0, 1.0)
    dx = px - (a[0] + t * ab[0])
    dy = py - (a[1] + t * ab[1])
    return np.hypot(dx, dy)


def _limb_endpoints(spec: PuppetSpec, state: PuppetState, i: int) -> tuple[np.ndarray, np.ndarray]:
    j = spec.joints[i]
    a = _state_root(spec, state) if j.parent < 0 else state.joint_xy[j.parent]
    return np.asarray(a, dtype=np.float64), state.joint_xy[i]


def render_frame(
    spec: PuppetSpec,
    state: PuppetState,
    texture: np.ndarray,
    noise_rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, np.ndarray]:
    """Render one frame; returns (frame tensor, per-limb coverage alphas).

    The second value has shape (k, H, W) with each limb's anti-aliased
    coverage in [0, 1], useful for foreground masks and ownership queries.
    """
    h, w = spec.frame_h, spec.frame_w
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = _sample_texture(texture, spec, state.bg_offset)
    alphas = np.zeros((spec.k, h, w))
    for i in spec.draw_order:
        j = spec.joints[i]
        a, b = _limb_endpoints(spec, state, i)
        dist = _segment_distance(xx, yy, a, b)
        alpha = np.clip(j.thickness + 0.5 - dist, 0.0, 1.0)
        alphas[i] = alpha
        color = np.asarray(j.color).reshape(3, 1, 1)
        img = img * (1.0 - alpha) + color * alpha
    if noise_rng is not None and spec.noise_level > 0:
        img = img + noise_rng.normal(0.0, spec.noise_level, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Tensor(img[None]), alphas


def _ownership(spec: PuppetSpec, alphas: np.ndarray) -> np.ndarray:
    """Topmost limb index covering each pixel (alpha >= 0.5), else -1."""
    h, w = alphas.shape[1:]
    owner = np.full((h, w), -1, dtype=np.int64)
    for i in spec.draw_order:  # later draws overwrite: topmost wins
        owner[alphas[i] >= 0.5] = i
    return owner


def exact_flow(
    spec: PuppetSpec,
    state_a: PuppetState,
    state_b: PuppetState,
    grid_h: Optional[int] = None,
    grid_w: Optional[int] = None,
    scale: int = 1,
    from_frame: int = 0,
    to_frame: int = 0,
) -> FlowField:
    """Exact displacement field from state_a's frame to state_b's.

    Every pixel moves with its owner: limb pixels follow the rigid motion of
    their limb (decomposed in the limb's local frame), background pixels
    follow the global drift. Evaluated at the centers of a grid_h x grid_w
    grid mapped into frame coordinates by ``scale`` (grid defaults to the
    full frame resolution), with displacements expressed in grid pixels.
    """
    if grid_h is None:
        grid_h, grid_w = spec.frame_h, spec.frame_w
    gy, gx = np.mgrid[0:grid_h, 0:grid_w].astype(np.float64)
    # frame-space sample positions of the grid pixel centers
    px = (gx + 0.5) * scale - 0.5
    py = (gy + 0.5) * scale - 0.5

    _, alphas = render_frame(spec, state_a, np.zeros((3, spec.texture_cells, spec.texture_cells)))
    if scale == 1 and (grid_h, grid_w) == (spec.frame_h, spec.frame_w):
        owner = _ownership(spec, alphas)
    else:
        # ownership at off-grid sample points: nearest rendered pixel
        ry = np.clip(np.rint(py), 0, spec.frame_h - 1).astype(np.int64)
        rx = np.clip(np.rint(px), 0, spec.frame_w - 1).astype(np.int64)
        owner = _ownership(spec, alphas)[ry, rx]

    drift = state_b.bg_offset - state_a.bg_offset
    u = np.full((grid_h, grid_w), drift[0])
    v = np.full((grid_h, grid_w), drift[1])
    for i in range(spec.k):
        sel = owner == i
        if not sel.any():
            continue
        a0, b0 = _limb_endpoints(spec, state_a, i)
        a1, b1 = _limb_endpoints(spec, state_b, i)
        axis0 = (b0 - a0) / np.hypot(*(b0 - a0))
        axis1 = (b1 - a1) / np.hypot(*(b1 - a1))
        norm0 = np.array([-axis0[1], axis0[0]])
        norm1 = np.array([-axis1[1], axis1[0]])
        rx_, ry_ = px[sel] - a0[0], py[sel] - a0[1]
        lon = rx_ * axis0[0] + ry_ * axis0[1]
        lat = rx_ * norm0[0] + ry_ * norm0[1]
        nx = a1[0] + lon * axis1[0] + lat * norm1[0]
        ny = a1[1] + lon * axis1[1] + lat * norm1[1]
        u[sel] = nx - px[sel]
        v[sel] = ny - py[sel]
    return FlowField(u / scale, v / scale, from_frame, to_frame)


def generate_sequence(
    spec: PuppetSpec, length: int, seed: int
) -> tuple[list[Tensor], list[Pose], list[FlowField]]:
    """Deterministic sequence: frames, exact poses, consecutive true flows.

    The flows list has length - 1 entries; flows[t] maps frame t to t+1 at
    full frame resolution.
    """
    rng = np.random.default_rng(seed)
    texture = _make_texture(spec, rng)
    states = simulate_states(spec, length, rng)
    frames = [render_frame(spec, s, texture, noise_rng=rng)[0] for s in states]
    poses = [Pose(s.joint_xy.copy()) for s in states]
    flows = [
        exact_flow(spec, states[t], states[t + 1], from_frame=t, to_frame=t + 1)
        for t in range(length - 1)
    ]
    return frames, poses, flows


def generate_dataset(
    spec: PuppetSpec, length: int, seed: int, flow_window: int = 1
) -> tuple[list[Tensor], list[Pose], dict[tuple[int, int], FlowField]]:
    """Like generate_sequence, but with flows for every offset |delta| <= window.

    Frames and poses are bit-identical to generate_sequence for the same
    seed. The returned dict is keyed (t, delta) and ready for save_dataset.
    """
    if flow_window < 0:
        raise ValueError("flow_window must be >= 0")
    rng = np.random.default_rng(seed)
    texture = _make_texture(spec, rng)
    states = simulate_states(spec, length, rng)
    frames = [render_frame(spec, s, texture, noise_rng=rng)[0] for s in states]
    poses = [Pose(s.joint_xy.copy()) for s in states]
    flows = {}
    for t in range(length):
        for delta in range(-flow_window, flow_window + 1):
            if delta == 0 or not 0 <= t + delta < length:
                continue
            flows[(t, delta)] = exact_flow(
                spec, states[t], states[t + delta], from_frame=t, to_frame=t + delta
            )
    return frames, poses, flows


def add_label_noise(
    poses: Sequence[Pose],
    jitter_sigma: float,
    outlier_rate: float,
    seed: int,
    frame_size: tuple[int, int] = (64, 64),
) -> list[Pose]:
    """Gaussian jitter on every joint plus uniform relocation of a fraction.

    Models annotation noise from an imperfect automatic labeler. Visibility
    flags are preserved.
    """
    if not 0.0 <= outlier_rate <= 1.0:
        raise ValueError("outlier_rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    h, w = frame_size
    out = []
    for pose in poses:
        p = pose.copy()
        p.coords = p.coords + rng.normal(0.0, jitter_sigma, size=p.coords.shape)
        relocate = rng.random(p.k) < outlier_rate
        uniform = np.stack(
            [rng.uniform(0, w - 1, size=p.k), rng.uniform(0, h - 1, size=p.k)], axis=1
        )
        p.coords = np.where(relocate[:, None], uniform, p.coords)
        out.append(p)
    return out


# ---------------------------------------------------------------------------
# dataset directory layout:
#   frame_%05d.tns          frames in the tensor format
#   poses.csv               rows: frame, joint, x, y, visible
#   flow_%05d_%+03d.flo     flow from frame t to t+delta (optional)


def save_dataset(
    out_dir,
    frames: Sequence[Tensor],
    poses: Sequence[Pose],
    flows: Optional[dict[tuple[int, int], FlowField]] = None,
):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        save_tensor(frame, out / f"frame_{t:05d}.tns")
    with open(out / "poses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "joint", "x", "y", "visible"])
        for t, pose in enumerate(poses):
            for j in range(pose.k):
                writer.writerow(
                    [t, j, f"{pose.coords[j, 0]:.17g}", f"{pose.coords[j, 1]:.17g}", int(pose.visible[j])]
                )
    if flows:
        for (t, delta), fl in sorted(flows.items()):
            write_flo(fl, out / f"flow_{t:05d}_{delta:+03d}.flo")


def load_poses_csv(path) -> list[Pose]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["frame", "joint", "x", "y", "visible"]:
            raise FormatError(f"{path}: unexpected pose CSV header {header}")
        for row in reader:
            rows.append((int(row[0]), int(row[1]), float(row[2]), float(row[3]), int(row[4])))
    if not rows:
        return []
    n_frames = max(r[0] for r in rows) + 1
    k = max(r[1] for r in rows) + 1
    coords = np.zeros((n_frames, k, 2))
    visible = np.zeros((n_frames, k), dtype=bool)
    seen = np.zeros((n_frames, k), dtype=bool)
    for t, j, x, y, vis in rows:
        coords[t, j] = (x, y)
        visible[t, j] = bool(vis)
        seen[t, j] = True
    if not seen.all():
        raise FormatError(f"{path}: missing (frame, joint) entries")
    return [Pose(coords[t], visible[t]) for t in range(n_frames)]


def load_dataset(data_dir) -> tuple[list[Tensor], list[Pose], dict[tuple[int, int], FlowField]]:
    d = Path(data_dir)
    frame_paths = sorted(d.glob("frame_*.tns"))
    if not frame_paths:
        raise FormatError(f"{d}: no frame_*.tns files")
    frames = [load_tensor(p) for p in frame_paths]
    poses = load_poses_csv(d / "poses.csv")
    if len(poses) != len(frames):
        raise FormatError(f"{d}: {len(frames)} frames but {len(poses)} pose rows")
    flows = {}
    pattern = re.compile(r"flow_(\d{5})_([+-]\d{2})\.flo$")
    for p in sorted(d.glob("flow_*.flo")):
        m = pattern.match(p.name)
        if not m:
            raise FormatError(f"{p}: flow file name does not match flow_%05d_%+03d.flo")
        t, delta = int(m.group(1)), int(m.group(2))
        flows[(t, delta)] = read_flo(p, from_frame=t, to_frame=t + delta)
    return frames, poses, flows


def spec_from_json(text: str) -> PuppetSpec:
    """Build a PuppetSpec from JSON overrides on the default puppet.

    Top-level keys mirror PuppetSpec fields; "joints" (a list of JointSpec
    field dicts) replaces the whole joint list when present. An empty object
    yields the default puppet.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid puppet spec JSON: {e}") from e
    if not isinstance(raw, dict):
        raise FormatError("puppet spec JSON must be an object")
    base = default_puppet()
    kwargs = {}
    if "joints" in raw and "draw_order" not in raw:
        kwargs["draw_order"] = tuple(range(len(raw["joints"])))
    for key, value in raw.items():
        if key == "joints":
            kwargs["joints"] = tuple(JointSpec(**{**j, "color": tuple(j["color"])}) for j in value)
        elif key in ("root", "background_drift", "texture_range", "root_sway"):
            kwargs[key] = tuple(value)
        elif key == "draw_order":
            kwargs[key] = tuple(value)
        elif key in ("frame_h", "frame_w", "texture_cells", "noise_level"):
            kwargs[key] = value
        else:
            raise FormatError(f"unknown puppet spec key {key!r}")
    return replace(base, **kwargs)
