"""Scikit-learn style estimators wrapping the training pipeline.

Three estimators cover the pipeline's operating modes:

- HeatmapPoseEstimator: per-frame heatmap regression with optional fusion.
- CoordinatePoseEstimator: the direct coordinate-regression baseline.
- FlowPooledPoseEstimator: heatmap regression plus flow-warped temporal
  pooling; treats X as one contiguous video sequence.

All follow the sklearn contract: hyperparameters are constructor arguments
stored verbatim (so get_params/set_params/clone work), fit(X, y) returns
self and stores learned state in trailing-underscore attributes, predict
maps frames to (N, k, 2) joint coordinates, and score returns the fraction
of visible joints located within two heatmap pixels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigError
from .evaluation import fraction_within
from .flow import FlowField, FlowParams, downsample_flow, estimate_flow, warp_heatmap
from .heatmap import Pose, decode_argmax_batch, synthesize_target
from .network import (
    build_network,
    decode_coordinate_output,
    default_coordinate_config,
    default_heatmap_config,
    rectify_heatmap,
)
from .temporal import learn_pooling_weights, pool_max, pool_parametric, pool_sum
from .tensor import Tensor
from .train import Dataset, TrainConfig, train
from .validation import check_same_length, ensure_frames, ensure_poses

__all__ = [
    "HeatmapPoseEstimator",
    "CoordinatePoseEstimator",
    "FlowPooledPoseEstimator",
]


def _split_dataset(frames, poses, val_fraction: float) -> Dataset:
    n = len(frames)
    n_val = min(max(int(round(n * val_fraction)), 1), n - 1) if n > 1 else 0
    cut = n - n_val
    return Dataset(frames[:cut], poses[:cut], frames[cut:], poses[cut:])


class _PoseEstimatorBase(BaseEstimator):
    """Shared fit/predict plumbing; subclasses choose the network config."""

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            seed=self.seed,
            iters=self.iterations,
            lr=self.learning_rate,
            momentum=self.momentum,
            crop=self.crop,
            rotation=self.rotation,
            sigma=getattr(self, "sigma", 1.5),
            network=self._network_kind,
            flip=self.flip_prob,
            val_every=self.val_every,
        )

    def _network_config(self, in_channels: int, input_size: tuple[int, int]):
        raise NotImplementedError

    def fit(self, X, y):
        frames = ensure_frames(X)
        poses = ensure_poses(y, getattr(self, "joint_count", 0))
        check_same_length(frames, poses)
        _, c, h, w = frames[0].shape
        config = self._network_config(c, (h, w))
        net = build_network(config, seed=self.seed)
        dataset = _split_dataset(frames, poses, self.val_fraction)
        result = train(net, dataset, self._train_config())
        self.network_ = result.network
        self.loss_curve_ = result.curve
        self.best_val_pck_ = result.best_val_pck
        self.n_features_in_ = c * h * w
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise ConfigError(f"{type(self).__name__} is not fitted; call fit first")

    def _predict_poses(self, frames) -> list[Pose]:
        net = self.network_
        out = []
        for frame in frames:
            trunk, fused, _ = net.forward(frame)
            if net.config.is_coordinate:
                coords = decode_coordinate_output(trunk, net.config.input_size)[0]
            else:
                pred = rectify_heatmap(fused if fused is not None else trunk)
                coords = decode_argmax_batch(pred, net.scale)[0][0]
            out.append(Pose(coords))
        return out

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        frames = ensure_frames(X)
        return np.stack([p.coords for p in self._predict_poses(frames)])

    def score(self, X, y) -> float:
        """Fraction of visible joints within two heatmap pixels of the label."""
        self._check_fitted()
        frames = ensure_frames(X)
        poses = ensure_poses(y)
        check_same_length(frames, poses)
        d = 2.0 * self.network_.scale
        return fraction_within(self._predict_poses(frames), poses, d)


class HeatmapPoseEstimator(_PoseEstimatorBase):
    """Frame-wise joint localization by heatmap regression."""

    _network_kind = "heatmap"

    def __init__(
        self,
        joint_count: int = 7,
        fusion: bool = True,
        sigma: float = 1.5,
        iterations: int = 1500,
        learning_rate: float = 0.1,
        momentum: float = 0.95,
        crop: int = 56,
        rotation: float = 40.0,
        flip_prob: float = 0.0,
        val_fraction: float = 1 / 6,
        val_every: int = 100,
        seed: int = 0,
    ):
        self.joint_count = joint_count
        self.fusion = fusion
        self.sigma = sigma
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.crop = crop
        self.rotation = rotation
        self.flip_prob = flip_prob
        self.val_fraction = val_fraction
        self.val_every = val_every
        self.seed = seed

    def _network_config(self, in_channels, input_size):
        cfg = default_heatmap_config(self.joint_count, input_size, fusion=self.fusion)
        if in_channels != cfg.in_channels:
            cfg = type(cfg).from_dict({**cfg.to_dict(), "in_channels": in_channels})
        return cfg


class CoordinatePoseEstimator(_PoseEstimatorBase):
    """Direct (x, y) regression baseline: trunk, global pooling, linear map."""

    _network_kind = "coordinate"

    def __init__(
        self,
        joint_count: int = 7,
        iterations: int = 1500,
        learning_rate: float = 0.1,
        momentum: float = 0.95,
        crop: int = 56,
        rotation: float = 40.0,
        flip_prob: float = 0.0,
        val_fraction: float = 1 / 6,
        val_every: int = 100,
        seed: int = 0,
    ):
        self.joint_count = joint_count
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.crop = crop
        self.rotation = rotation
        self.flip_prob = flip_prob
        self.val_fraction = val_fraction
        self.val_every = val_every
        self.seed = seed

    def _network_config(self, in_channels, input_size):
        cfg = default_coordinate_config(self.joint_count, input_size)
        if in_channels != cfg.in_channels:
            cfg = type(cfg).from_dict({**cfg.to_dict(), "in_channels": in_channels})
        return cfg


class FlowPooledPoseEstimator(HeatmapPoseEstimator):
    """Video pose estimation: heatmaps warped along flow and pooled over time.

    X is interpreted as one contiguous sequence of frames. For each frame t
    the heatmaps of frames t-n..t+n are warped to t along estimated flow
    and pooled; near sequence boundaries missing neighbors are substituted
    by the nearest available frame (with zero flow).
    """

    def __init__(
        self,
        joint_count: int = 7,
        n: int = 2,
        pooling: str = "parametric",
        flow_smoothness: float = 0.1,
        flow_iterations: int = 200,
        pool_samples: int = 50,
        fusion: bool = True,
        sigma: float = 1.5,
        iterations: int = 1500,
        learning_rate: float = 0.1,
        momentum: float = 0.95,
        crop: int = 56,
        rotation: float = 40.0,
        flip_prob: float = 0.0,
        val_fraction: float = 1 / 6,
        val_every: int = 100,
        seed: int = 0,
    ):
        super().__init__(
            joint_count=joint_count,
            fusion=fusion,
            sigma=sigma,
            iterations=iterations,
            learning_rate=learning_rate,
            momentum=momentum,
            crop=crop,
            rotation=rotation,
            flip_prob=flip_prob,
            val_fraction=val_fraction,
            val_every=val_every,
            seed=seed,
        )
        self.n = n
        self.pooling = pooling
        self.flow_smoothness = flow_smoothness
        self.flow_iterations = flow_iterations
        self.pool_samples = pool_samples

    def _heatmap(self, frame) -> Tensor:
        trunk, fused, _ = self.network_.forward(frame)
        return rectify_heatmap(fused if fused is not None else trunk)

    def _warped_stack(self, frames, heatmaps, t: int) -> list[Tensor]:
        params = FlowParams(self.flow_smoothness, self.flow_iterations)
        scale = self.network_.scale
        stack = []
        for delta in range(-self.n, self.n + 1):
            s = min(max(t + delta, 0), len(frames) - 1)
            if s == t:
                stack.append(heatmaps[t])
                continue
            fl = estimate_flow(frames[t], frames[s], params, from_frame=t, to_frame=s)
            stack.append(warp_heatmap(heatmaps[s], downsample_flow(fl, scale)))
        return stack

    def _pool(self, stack) -> Tensor:
        if self.pooling == "sum":
            return pool_sum(stack)
        if self.pooling == "max":
            return pool_max(stack)
        return pool_parametric(stack, self.pooling_weights_)

    def fit(self, X, y):
        if self.pooling not in ("parametric", "sum", "max"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        super().fit(X, y)
        if self.pooling == "parametric":
            frames = ensure_frames(X)
            poses = ensure_poses(y, self.joint_count)
            interior = range(self.n, max(len(frames) - self.n, self.n))
            take = list(interior)
            if len(take) > self.pool_samples:
                idx = np.linspace(0, len(take) - 1, self.pool_samples).round().astype(int)
                take = [take[i] for i in idx]
            if not take:
                raise ConfigError(f"sequence of {len(frames)} frames is too short for n={self.n}")
            heatmaps = [self._heatmap(f) for f in frames]
            net = self.network_
            samples = []
            for t in take:
                stack = self._warped_stack(frames, heatmaps, t)
                target, mask = synthesize_target(
                    poses[t], net.config.heatmap_size, net.scale, self.sigma
                )
                if mask.sum() == 0:
                    continue
                samples.append((stack, target))
            self.pooling_weights_ = learn_pooling_weights(samples)
        return self

    def _predict_poses(self, frames) -> list[Pose]:
        heatmaps = [self._heatmap(f) for f in frames]
        scale = self.network_.scale
        out = []
        for t in range(len(frames)):
            composite = self._pool(self._warped_stack(frames, heatmaps, t))
            coords = decode_argmax_batch(composite, scale)[0][0]
            out.append(Pose(coords))
        return out

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        if self.pooling == "parametric" and not hasattr(self, "pooling_weights_"):
            raise ConfigError("parametric pooling weights missing; call fit first")
        frames = ensure_frames(X)
        return np.stack([p.coords for p in self._predict_poses(frames)])
