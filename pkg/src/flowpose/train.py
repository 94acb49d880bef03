"""Training: augmentation, SGD with momentum, and the full loop.

Every iteration takes one augmented sample, backpropagates the heatmap (or
coordinate) loss, and applies v <- mu*v - lr*g; p <- p + v. The learning
rate steps down by 10x at 2/3 and 5/6 of the configured iterations. All
randomness flows from a single seeded generator, so identical configs
produce bit-identical loss curves; the returned network carries the
parameters of the best validation checkpoint.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, TrainingDiverged
from .flow import bilinear_sample
from .heatmap import (
    FLIP_PAIRS,
    JOINT_NAMES,
    Pose,
    decode_argmax_batch,
    in_frame,
    synthesize_target,
)
from .network import (
    Network,
    decode_coordinate_output,
    encode_coordinate_target,
    rectify_heatmap,
)
from .tensor import Tape, Tensor, add, l2_loss, scale

__all__ = [
    "AugmentParams",
    "augment",
    "OptimizerState",
    "sgd_momentum_step",
    "TrainConfig",
    "parse_train_config",
    "Dataset",
    "TrainResult",
    "train",
    "write_loss_curve",
]


@dataclass
class AugmentParams:
    """Crop -> flip -> rotate -> resize, with matching coordinate transforms."""

    crop_size: int
    flip_prob: float = 0.0
    rotation_range: float = 0.0  # degrees, symmetric about 0
    output_size: int = 64
    rng_seed: int = 0
    flip_pairs: tuple[tuple[int, int], ...] = FLIP_PAIRS


def _affine_chain(crop: int, out: int, tx: int, ty: int, flipped: bool, angle_deg: float):
    """Forward map from source coordinates to output coordinates.

    Returns (M, b) with p_out = M @ p_src + b, composed from the crop
    translation, optional horizontal mirror, rotation about the crop
    center, and the resize to the output grid (half-pixel convention).
    """
    M = np.eye(2)
    b = np.array([-float(tx), -float(ty)])

    if flipped:
        F = np.array([[-1.0, 0.0], [0.0, 1.0]])
        fb = np.array([crop - 1.0, 0.0])
        M = F @ M
        b = F @ b + fb

    c = (crop - 1.0) / 2.0
    a = math.radians(angle_deg)
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    M = R @ M
    b = R @ (b - c) + c

    s = out / crop
    M = s * M
    b = (b + 0.5) * s - 0.5
    return M, b


def augment(frame: Tensor, pose: Pose, params: AugmentParams, rng: np.random.Generator) -> tuple[Tensor, Pose]:
    """Random crop, flip, rotation and resize of a frame and its pose.

    The image is resampled in a single pass through the composed inverse
    affine (bilinear, replicated borders). Joint coordinates get the same
    forward transform; on a flip, left/right joint labels are swapped.
    Joints transformed out of the output frame are marked invisible.
    """
    B, C, H, W = frame.shape
    crop = params.crop_size
    if crop > H or crop > W:
        raise ValueError(f"crop {crop} exceeds frame {H}x{W}")
    if params.flip_prob > 0.0 and any(max(i, j) >= pose.k for i, j in params.flip_pairs):
        raise ValueError(f"flip pairs {params.flip_pairs} exceed the pose's {pose.k} joints")
    tx = int(rng.integers(0, W - crop + 1))
    ty = int(rng.integers(0, H - crop + 1))
    flipped = bool(rng.random() < params.flip_prob)
    angle = float(rng.uniform(-params.rotation_range, params.rotation_range))

    out = params.output_size
    M, b = _affine_chain(crop, out, tx, ty, flipped, angle)
    Minv = np.linalg.inv(M)

    oy, ox = np.mgrid[0:out, 0:out].astype(np.float64)
    sx = Minv[0, 0] * (ox - b[0]) + Minv[0, 1] * (oy - b[1])
    sy = Minv[1, 0] * (ox - b[0]) + Minv[1, 1] * (oy - b[1])
    img = bilinear_sample(frame.data, sy, sx, edge=True)

    coords = pose.coords @ M.T + b
    visible = pose.visible & in_frame(coords, out, out)
    new_pose = Pose(coords, visible)
    if flipped:
        for i, j in params.flip_pairs:
            new_pose.coords[[i, j]] = new_pose.coords[[j, i]]
            new_pose.visible[[i, j]] = new_pose.visible[[j, i]]
    return Tensor(img), new_pose


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.95
    velocities: Optional[list[np.ndarray]] = None
    iteration: int = 0
    lr_schedule: tuple[tuple[int, float], ...] = ()  # (iteration, new lr)


def sgd_momentum_step(params: Sequence[Tensor], state: OptimizerState):
    """v <- mu*v - lr*g; p <- p + v. Parameters with no gradient keep velocity decay."""
    if state.velocities is None:
        state.velocities = [np.zeros_like(p.data) for p in params]
    if len(state.velocities) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    for it, lr in state.lr_schedule:
        if state.iteration == it:
            state.learning_rate = lr
    mu, lr = state.momentum, state.learning_rate
    for p, v in zip(params, state.velocities):
        g = p.grad if p.grad is not None else 0.0
        v *= mu
        v -= lr * g
        p.data = p.data + v
    state.iteration += 1


def schedule_for(iters: int, lr: float) -> tuple[tuple[int, float], ...]:
    """Step decays: 10x down at 2/3 of the run, 100x down at 5/6."""
    return ((int(iters * 2 / 3), lr * 0.1), (int(iters * 5 / 6), lr * 0.01))


# ---------------------------------------------------------------------------
# config


@dataclass
class TrainConfig:
    seed: int = 0
    iters: int = 3000
    lr: float = 0.1
    momentum: float = 0.95
    crop: int = 56
    rotation: float = 40.0
    sigma: float = 1.5
    n: int = 0
    pooling_type: str = "parametric"
    network: str = "heatmap"  # heatmap | coordinate
    fusion: bool = True
    flip: float = 0.0
    val_every: int = 100

    def __post_init__(self):
        if self.network not in ("heatmap", "coordinate"):
            raise ConfigError(f"config key 'network': unknown value {self.network!r}")
        if self.pooling_type not in ("parametric", "sum", "max"):
            raise ConfigError(f"config key 'pooling_type': unknown value {self.pooling_type!r}")
        if self.iters < 1:
            raise ConfigError("config key 'iters': must be >= 1")
        if not 0.0 <= self.flip <= 1.0:
            raise ConfigError("config key 'flip': must be in [0, 1]")
        if self.n < 0:
            raise ConfigError("config key 'n': must be >= 0")


_CONFIG_PARSERS = {
    "seed": int,
    "iters": int,
    "lr": float,
    "momentum": float,
    "crop": int,
    "rotation": float,
    "sigma": float,
    "n": int,
    "pooling_type": str,
    "network": str,
    "fusion": lambda s: bool(int(s)),
    "flip": float,
    "val_every": int,
}


def parse_train_config(text: str) -> TrainConfig:
    """Parse the key-value config format: one 'key = value' per line.

    Blank lines and lines starting with '#' are ignored. Unknown keys are
    rejected by name.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_PARSERS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _CONFIG_PARSERS[key](value)
        except ValueError as e:
            raise ConfigError(f"config key {key!r}: invalid value {value!r}") from e
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Dataset:
    train_frames: list[Tensor]
    train_poses: list[Pose]
    val_frames: list[Tensor]
    val_poses: list[Pose]

    def __post_init__(self):
        if not self.train_frames:
            raise ValueError("training split is empty")
        if len(self.train_frames) != len(self.train_poses):
            raise ValueError("training frames and poses differ in length")
        if len(self.val_frames) != len(self.val_poses):
            raise ValueError("validation frames and poses differ in length")


@dataclass
class TrainResult:
    network: Network
    curve: list[tuple[int, float, Optional[float]]]  # (iteration, train_loss, val_pck)
    best_val_pck: float
    best_iteration: int


def _val_pck(net: Network, frames: Sequence[Tensor], poses: Sequence[Pose], d: float) -> float:
    """Fraction of visible joints within d input pixels, over the whole split."""
    hits = 0
    total = 0
    for frame, pose in zip(frames, poses):
        out, fused, _ = net.forward(frame)
        if net.config.is_coordinate:
            coords = decode_coordinate_output(out, net.config.input_size)[0]
        else:
            pred = rectify_heatmap(fused if fused is not None else out)
            coords = decode_argmax_batch(pred, net.scale)[0][0]
        err = np.linalg.norm(coords - pose.coords, axis=1)
        hits += int((err[pose.visible] <= d).sum())
        total += int(pose.visible.sum())
    return hits / total if total else 0.0


def train(net: Network, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """SGD training with validation-based checkpoint selection.

    Deterministic given config.seed. Raises TrainingDiverged when the loss
    becomes non-finite. The network is left holding the parameters of the
    iteration with the best validation PCK (at d = 2 heatmap pixels).
    """
    cfg = net.config
    if (config.network == "coordinate") != cfg.is_coordinate:
        raise ConfigError(f"config network={config.network!r} does not match the built network")
    rng = np.random.default_rng(config.seed)
    # the canonical left/right pairing only applies to the 7-joint layout;
    # other joint sets flip coordinates without swapping labels
    pairs = FLIP_PAIRS if cfg.joint_count == len(JOINT_NAMES) else ()
    aug = AugmentParams(
        crop_size=config.crop,
        flip_prob=config.flip,
        rotation_range=config.rotation,
        output_size=cfg.input_size[0],
        rng_seed=config.seed,
        flip_pairs=pairs,
    )
    state = OptimizerState(
        learning_rate=config.lr,
        momentum=config.momentum,
        lr_schedule=schedule_for(config.iters, config.lr),
    )
    params = net.parameters()
    d_val = 2.0 * cfg.scale  # two heatmap pixels in input-pixel units

    n_train = len(dataset.train_frames)
    order = rng.permutation(n_train)
    cursor = 0
    curve: list[tuple[int, float, Optional[float]]] = []
    best_pck = -1.0
    best_iter = -1
    best_params = [p.data.copy() for p in params]

    for it in range(config.iters):
        # draw augmented samples until one carries a usable target
        for _ in range(n_train + 1):
            if cursor == n_train:
                order = rng.permutation(n_train)
                cursor = 0
            idx = int(order[cursor])
            cursor += 1
            frame, pose = augment(dataset.train_frames[idx], dataset.train_poses[idx], aug, rng)
            if cfg.is_coordinate:
                target, mask = encode_coordinate_target(pose, cfg.input_size)
            else:
                target, mask = synthesize_target(pose, cfg.heatmap_size, net.scale, config.sigma)
            if mask.sum() > 0:
                break
        else:
            raise ConfigError("no augmented sample kept any joint visible for a full epoch")

        net.zero_grad()
        # divergence surfaces as TrainingDiverged below, not as overflow warnings
        with np.errstate(over="ignore", invalid="ignore"):
            with Tape() as tape:
                trunk, fused, _ = net.forward(frame)
                w_spatial, w_fusion = cfg.loss_weights
                loss = scale(l2_loss(trunk, target, mask), w_spatial)
                if fused is not None:
                    loss = add(loss, scale(l2_loss(fused, target, mask), w_fusion))
                tape.backward(loss)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(f"iteration {it}: loss {loss_val!r}")
            sgd_momentum_step(params, state)

        val = None
        if dataset.val_frames and ((it + 1) % config.val_every == 0 or it + 1 == config.iters):
            val = _val_pck(net, dataset.val_frames, dataset.val_poses, d_val)
            if val > best_pck:
                best_pck = val
                best_iter = it + 1
                best_params = [p.data.copy() for p in params]
        curve.append((it + 1, loss_val, val))

    if best_iter >= 0:
        for p, data in zip(params, best_params):
            p.data = data
    return TrainResult(net, curve, best_pck, best_iter)


def write_loss_curve(curve: Sequence[tuple[int, float, Optional[float]]], path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "train_loss", "val_pck"])
        for it, loss, val in curve:
            writer.writerow([it, f"{loss:.17g}", "" if val is None else f"{val:.17g}"])
