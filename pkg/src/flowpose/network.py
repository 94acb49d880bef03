"""Declarative network construction: heatmap regressor, fusion branch,
coordinate baseline.

A network is a named list of layers. The spatial trunk maps a frame to one
heatmap channel per joint at 1/4 resolution (exactly two 2x2 max-pools, all
strides 1, every other layer resolution-preserving). An optional fusion
branch concatenates two trunk activations (a deep one and a shallow skip)
and refines them through five more convolutions into a second heatmap
prediction. The coordinate baseline shares the trunk machinery but ends in
global average pooling and a linear map to 2k outputs.

Checkpoints are self-describing: the config travels with the weights, so a
checkpoint file alone rebuilds the network.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError
from .heatmap import Pose
from .tensor import (
    Tensor,
    avgpool2,
    concat_channels,
    conv2d,
    global_avgpool,
    maxpool2,
    read_tensor_stream,
    relu,
    write_tensor_stream,
)

__all__ = [
    "LayerSpec",
    "NetworkConfig",
    "Network",
    "build_network",
    "forward_spatial",
    "forward_coordinate_baseline",
    "rectify_heatmap",
    "default_heatmap_config",
    "default_coordinate_config",
    "encode_coordinate_target",
    "decode_coordinate_output",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"FPNET"

LAYER_KINDS = ("conv", "relu", "maxpool2", "concat-skip", "global-avgpool")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network.

    kinds:
      conv            resolution-preserving convolution (odd kernel,
                      pad = (k-1)/2, stride fixed at 1)
      relu            elementwise rectifier
      maxpool2        2x2 max pool, halves resolution
      concat-skip     channel-concat of earlier named activations; sources
                      larger than the smallest one are average-pooled down
      global-avgpool  spatial mean, output 1x1

    A skip source naming a conv resolves to that conv's activation: the
    output of its immediately following relu layer when one exists.
    """

    name: str
    kind: str
    kernel: tuple[int, int] = (1, 1)
    out_channels: int = 0
    pad: int = 0
    stride: int = 1
    skip_source: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == "conv":
            d.update(
                kernel=list(self.kernel),
                out_channels=self.out_channels,
                pad=self.pad,
                stride=self.stride,
            )
        elif self.kind == "concat-skip":
            d["skip_source"] = list(self.skip_source)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            name=d["name"],
            kind=d["kind"],
            kernel=tuple(d.get("kernel", (1, 1))),
            out_channels=d.get("out_channels", 0),
            pad=d.get("pad", 0),
            stride=d.get("stride", 1),
            skip_source=tuple(d.get("skip_source", ())),
        )


def conv_spec(name: str, kernel: int, out_channels: int) -> LayerSpec:
    """Resolution-preserving conv shorthand (square odd kernel, same pad)."""
    return LayerSpec(
        name, "conv", kernel=(kernel, kernel), out_channels=out_channels, pad=(kernel - 1) // 2
    )


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple[int, int]  # (H, W)
    joint_count: int
    spatial_layers: tuple[LayerSpec, ...]
    fusion_layers: tuple[LayerSpec, ...] = ()
    loss_weights: tuple[float, float] = (1.0, 1.0)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "spatial_layers", tuple(self.spatial_layers))
        object.__setattr__(self, "fusion_layers", tuple(self.fusion_layers))
        validate_config(self)

    @property
    def is_coordinate(self) -> bool:
        return any(l.kind == "global-avgpool" for l in self.spatial_layers)

    @property
    def pool_count(self) -> int:
        return sum(l.kind == "maxpool2" for l in self.spatial_layers)

    @property
    def scale(self) -> int:
        return 2 ** self.pool_count

    @property
    def heatmap_size(self) -> tuple[int, int]:
        return (self.input_size[0] // self.scale, self.input_size[1] // self.scale)

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "joint_count": self.joint_count,
            "in_channels": self.in_channels,
            "loss_weights": list(self.loss_weights),
            "spatial_layers": [l.to_dict() for l in self.spatial_layers],
            "fusion_layers": [l.to_dict() for l in self.fusion_layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            input_size=tuple(d["input_size"]),
            joint_count=d["joint_count"],
            spatial_layers=tuple(LayerSpec.from_dict(l) for l in d["spatial_layers"]),
            fusion_layers=tuple(LayerSpec.from_dict(l) for l in d.get("fusion_layers", ())),
            loss_weights=tuple(d.get("loss_weights", (1.0, 1.0))),
            in_channels=d.get("in_channels", 3),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _last_conv(layers) -> Optional[LayerSpec]:
    for l in reversed(layers):
        if l.kind == "conv":
            return l
    return None


def validate_config(config: NetworkConfig):
    """Structural validation; raises ConfigError naming the offending layer."""
    if config.joint_count < 1:
        raise ConfigError("joint_count must be >= 1")
    if config.in_channels < 1:
        raise ConfigError("in_channels must be >= 1")
    names = set()
    for l in list(config.spatial_layers) + list(config.fusion_layers):
        if l.kind not in LAYER_KINDS:
            raise ConfigError(f"layer {l.name!r}: unknown kind {l.kind!r}")
        if not l.name:
            raise ConfigError("every layer needs a name")
        if l.name in names:
            raise ConfigError(f"duplicate layer name {l.name!r}")
        names.add(l.name)
        if l.kind == "conv":
            kh, kw = l.kernel
            if kh % 2 == 0 or kw % 2 == 0 or kh < 1 or kw < 1:
                raise ConfigError(f"layer {l.name!r}: kernel must be odd, got {l.kernel}")
            if l.stride != 1:
                raise ConfigError(f"layer {l.name!r}: stride must be 1, got {l.stride}")
            if l.pad != (kh - 1) // 2 or kh != kw:
                raise ConfigError(
                    f"layer {l.name!r}: convs must preserve resolution "
                    f"(square kernel, pad = (k-1)/2), got kernel {l.kernel} pad {l.pad}"
                )
            if l.out_channels < 1:
                raise ConfigError(f"layer {l.name!r}: out_channels must be >= 1")

    pools = [l for l in config.spatial_layers if l.kind == "maxpool2"]
    if len(pools) != 2:
        raise ConfigError(f"spatial trunk must contain exactly two maxpool2 layers, found {len(pools)}")
    if any(l.kind == "maxpool2" for l in config.fusion_layers):
        raise ConfigError("fusion layers must not change resolution (no maxpool2)")
    if any(l.kind == "concat-skip" for l in config.spatial_layers):
        raise ConfigError("concat-skip is only valid inside fusion_layers")

    last = _last_conv(config.spatial_layers)
    if last is None:
        raise ConfigError("spatial trunk needs at least one conv layer")

    gaps = [l for l in config.spatial_layers if l.kind == "global-avgpool"]
    if gaps:
        # coordinate-baseline shape: trunk + global pooling + linear map to 2k
        if len(gaps) > 1:
            raise ConfigError("at most one global-avgpool layer is allowed")
        if config.fusion_layers:
            raise ConfigError("a coordinate baseline cannot have fusion layers")
        if last.out_channels != 2 * config.joint_count:
            raise ConfigError(
                f"coordinate baseline must end in a conv with {2 * config.joint_count} "
                f"channels, got {last.out_channels}"
            )
        if config.spatial_layers.index(gaps[0]) > config.spatial_layers.index(last):
            raise ConfigError("global-avgpool must precede the final linear map")
    else:
        if last.out_channels != config.joint_count:
            raise ConfigError(
                f"spatial trunk must end in a conv with {config.joint_count} channels "
                f"(one heatmap per joint), got {last.out_channels}"
            )

    if config.fusion_layers:
        first = config.fusion_layers[0]
        if first.kind != "concat-skip" or len(first.skip_source) < 2:
            raise ConfigError(
                "fusion_layers must start with a concat-skip of at least two spatial activations"
            )
        spatial_names = {l.name for l in config.spatial_layers}
        for layer in config.fusion_layers:
            for src in layer.skip_source:
                if src not in spatial_names:
                    raise ConfigError(f"layer {layer.name!r}: skip source {src!r} does not exist")
        fusion_convs = [l for l in config.fusion_layers if l.kind == "conv"]
        if len(fusion_convs) != 5:
            raise ConfigError(f"fusion branch must contain exactly 5 convs, found {len(fusion_convs)}")
        if fusion_convs[-1].out_channels != config.joint_count:
            raise ConfigError(
                f"fusion output must have {config.joint_count} channels, got {fusion_convs[-1].out_channels}"
            )
        if sum(l.kind == "concat-skip" for l in config.fusion_layers) > 1:
            raise ConfigError("only one concat-skip is allowed in the fusion branch")

    propagate_shapes(config)  # raises on spatial inconsistencies


def _activation_name(layers: tuple[LayerSpec, ...], source: str) -> str:
    """Resolve a skip source to the layer whose output represents it."""
    for i, l in enumerate(layers):
        if l.name == source:
            if l.kind == "conv" and i + 1 < len(layers) and layers[i + 1].kind == "relu":
                return layers[i + 1].name
            return source
    raise ConfigError(f"skip source {source!r} does not exist")


def propagate_shapes(config: NetworkConfig) -> dict[str, tuple[int, int, int]]:
    """Layer-name -> (C, H, W) output shapes; raises ConfigError on mismatch."""
    shapes: dict[str, tuple[int, int, int]] = {}
    cur = (config.in_channels, config.input_size[0], config.input_size[1])
    for l in config.spatial_layers:
        cur = _layer_shape(l, cur, config, shapes)
        shapes[l.name] = cur
    for l in config.fusion_layers:
        if l.kind == "concat-skip":
            srcs = [shapes[_activation_name(config.spatial_layers, s)] for s in l.skip_source]
            target_hw = min((h, w) for _, h, w in srcs)
            channels = 0
            for c, h, w in srcs:
                while (h, w) > target_hw:
                    if h % 2 or w % 2 or (h // 2, w // 2) < target_hw:
                        raise ConfigError(
                            f"layer {l.name!r}: cannot align source of size {h}x{w} to {target_hw}"
                        )
                    h, w = h // 2, w // 2
                if (h, w) != target_hw:
                    raise ConfigError(f"layer {l.name!r}: skip sources have incompatible sizes")
                channels += c
            cur = (channels, *target_hw)
        else:
            cur = _layer_shape(l, cur, config, shapes)
        shapes[l.name] = cur
    return shapes


def _layer_shape(l: LayerSpec, cur, config, shapes) -> tuple[int, int, int]:
    c, h, w = cur
    if l.kind == "conv":
        return (l.out_channels, h, w)
    if l.kind == "relu":
        return cur
    if l.kind == "maxpool2":
        if h % 2 or w % 2:
            raise ConfigError(f"layer {l.name!r}: maxpool2 needs even input, got {h}x{w}")
        return (c, h // 2, w // 2)
    if l.kind == "global-avgpool":
        return (c, 1, 1)
    raise ConfigError(f"layer {l.name!r}: unexpected kind {l.kind!r}")


# ---------------------------------------------------------------------------


class Network:
    """A built network: config plus parameter tensors in declaration order."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        shapes = propagate_shapes(config)
        cur_c = config.in_channels
        for l in list(config.spatial_layers) + list(config.fusion_layers):
            if l.kind == "conv":
                kh, kw = l.kernel
                fan_in = cur_c * kh * kw
                bound = np.sqrt(3.0 / fan_in)  # uniform with variance 1/fan_in
                kernel = Tensor(
                    rng.uniform(-bound, bound, size=(l.out_channels, cur_c, kh, kw)),
                    requires_grad=True,
                )
                bias = Tensor(np.zeros((1, l.out_channels, 1, 1)), requires_grad=True)
                self.params[f"{l.name}.kernel"] = kernel
                self.params[f"{l.name}.bias"] = bias
            cur_c = shapes[l.name][0]
        self._spatial_out = _last_conv(config.spatial_layers).name
        last_fusion = _last_conv(config.fusion_layers)
        self._fusion_out = last_fusion.name if last_fusion else None

    @property
    def joint_count(self) -> int:
        return self.config.joint_count

    @property
    def scale(self) -> int:
        return self.config.scale

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _apply(self, l: LayerSpec, x: Tensor) -> Tensor:
        if l.kind == "conv":
            return conv2d(x, self.params[f"{l.name}.kernel"], self.params[f"{l.name}.bias"], pad=l.pad)
        if l.kind == "relu":
            return relu(x)
        if l.kind == "maxpool2":
            return maxpool2(x)
        if l.kind == "global-avgpool":
            return global_avgpool(x)
        raise ConfigError(f"layer {l.name!r}: unexpected kind {l.kind!r}")

    def forward(self, frame: Tensor) -> tuple[Tensor, Optional[Tensor], dict[str, Tensor]]:
        """Run the network; returns (trunk prediction, fusion prediction, activations).

        The predictions are the raw outputs of the final trunk and fusion
        convolutions: the regression loss attaches to the conv output, so
        the maps may go negative. Any trailing relu in the stack still runs
        (its output is in ``acts``) and rectify_heatmap gives the
        non-negative confidence product for warping and pooling.
        """
        cfg = self.config
        expect = (cfg.in_channels, *cfg.input_size)
        if frame.shape[1:] != expect:
            raise ValueError(f"frame shape {frame.shape[1:]} does not match configured {expect}")
        acts: dict[str, Tensor] = {}
        cur = frame
        for l in cfg.spatial_layers:
            cur = self._apply(l, cur)
            acts[l.name] = cur
        fusion_out = None
        if cfg.fusion_layers:
            for l in cfg.fusion_layers:
                if l.kind == "concat-skip":
                    parts = [acts[_activation_name(cfg.spatial_layers, s)] for s in l.skip_source]
                    target_hw = min(p.shape[2:] for p in parts)
                    aligned = []
                    for p in parts:
                        while p.shape[2:] > target_hw:
                            p = avgpool2(p)
                        aligned.append(p)
                    cur = aligned[0]
                    for p in aligned[1:]:
                        cur = concat_channels(cur, p)
                else:
                    cur = self._apply(l, cur)
                acts[l.name] = cur
            fusion_out = acts[self._fusion_out]
        return acts[self._spatial_out], fusion_out, acts


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    """Initialize weights uniform in +-sqrt(3/fan_in), biases zero."""
    return Network(config, np.random.default_rng(seed))


def forward_spatial(net: Network, frame: Tensor) -> tuple[Tensor, Optional[Tensor], dict[str, Tensor]]:
    """Heatmap prediction: (trunk heatmaps, fusion heatmaps or None, activations)."""
    if net.config.is_coordinate:
        raise ConfigError("forward_spatial requires a heatmap config")
    return net.forward(frame)


def rectify_heatmap(heatmap: Tensor) -> Tensor:
    """Clamp a predicted heatmap to its non-negative confidence part.

    The regression output can dip below zero; everything downstream of the
    spatial net (warping, cross-channel pooling, saved heatmap files) works
    on the rectified map. Not recorded on the tape.
    """
    return Tensor(np.maximum(heatmap.data, 0.0))


def forward_coordinate_baseline(net: Network, frame: Tensor) -> Pose:
    """Run the coordinate baseline on one frame and decode to a Pose."""
    if not net.config.is_coordinate:
        raise ConfigError("forward_coordinate_baseline requires a coordinate config")
    if frame.shape[0] != 1:
        raise ValueError("coordinate decoding expects a single frame")
    out, _, _ = net.forward(frame)
    coords = decode_coordinate_output(out, net.config.input_size)
    return Pose(coords[0])


# ---------------------------------------------------------------------------
# coordinate encoding: channel 2j is joint j's x, channel 2j+1 its y, both
# normalized so that [0, 1] spans the frame's pixel coverage area


def encode_coordinate_target(pose: Pose, input_size: tuple[int, int]) -> tuple[Tensor, np.ndarray]:
    h, w = input_size
    k = pose.k
    t = np.zeros((1, 2 * k, 1, 1))
    t[0, 0::2, 0, 0] = (pose.coords[:, 0] + 0.5) / w
    t[0, 1::2, 0, 0] = (pose.coords[:, 1] + 0.5) / h
    mask = np.zeros((1, 2 * k, 1, 1))
    mask[0, 0::2, 0, 0] = pose.visible
    mask[0, 1::2, 0, 0] = pose.visible
    return Tensor(t), mask


def decode_coordinate_output(out: Tensor, input_size: tuple[int, int]) -> np.ndarray:
    h, w = input_size
    B, c2, _, _ = out.shape
    if c2 % 2:
        raise ValueError(f"coordinate output needs an even channel count, got {c2}")
    coords = np.empty((B, c2 // 2, 2))
    coords[:, :, 0] = out.data[:, 0::2, 0, 0] * w - 0.5
    coords[:, :, 1] = out.data[:, 1::2, 0, 0] * h - 0.5
    return coords


# ---------------------------------------------------------------------------
# default desk-scale configurations


def default_heatmap_config(
    joint_count: int = 7, input_size: tuple[int, int] = (64, 64), fusion: bool = True
) -> NetworkConfig:
    """Trunk conv1..conv8 with two early pools; optional five-conv fusion branch."""

    def block(i, kernel, ch):
        return [conv_spec(f"conv{i}", kernel, ch), LayerSpec(f"relu{i}", "relu")]

    spatial = (
        block(1, 5, 32)
        + [LayerSpec("pool1", "maxpool2")]
        + block(2, 5, 64)
        + [LayerSpec("pool2", "maxpool2")]
        + block(3, 3, 128)
        + block(4, 3, 128)
        + block(5, 3, 128)
        + block(6, 1, 256)
        + block(7, 1, 256)
        + block(8, 1, joint_count)
    )
    fusion_layers = ()
    if fusion:
        fusion_layers = [
            LayerSpec("fuse_concat", "concat-skip", skip_source=("conv7", "conv3")),
        ]
        for i in range(1, 5):
            fusion_layers += block(f"_f{i}", 7, 64)
        fusion_layers += block("_f5", 1, joint_count)
    return NetworkConfig(
        input_size=input_size,
        joint_count=joint_count,
        spatial_layers=tuple(spatial),
        fusion_layers=tuple(fusion_layers),
    )


def default_coordinate_config(joint_count: int = 7, input_size: tuple[int, int] = (64, 64)) -> NetworkConfig:
    """Same trunk depth, then global pooling and a linear map to 2k outputs."""

    def block(i, kernel, ch):
        return [conv_spec(f"conv{i}", kernel, ch), LayerSpec(f"relu{i}", "relu")]

    spatial = (
        block(1, 5, 32)
        + [LayerSpec("pool1", "maxpool2")]
        + block(2, 5, 64)
        + [LayerSpec("pool2", "maxpool2")]
        + block(3, 3, 128)
        + block(4, 3, 128)
        + block(5, 3, 128)
        + block(6, 1, 256)
        + block(7, 1, 256)
        + [LayerSpec("gap", "global-avgpool"), conv_spec("coords", 1, 2 * joint_count)]
    )
    return NetworkConfig(
        input_size=input_size,
        joint_count=joint_count,
        spatial_layers=tuple(spatial),
    )


# ---------------------------------------------------------------------------
# checkpoints: magic, uint32-length-prefixed canonical config JSON, then
# every parameter tensor in declaration order


def save_checkpoint(net: Network, path):
    blob = net.config.canonical_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in net.params:
            write_tensor_stream(fh, net.params[name])


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        (length,) = struct.unpack("<I", fh.read(4))
        blob = fh.read(length)
        if len(blob) != length:
            raise FormatError(f"{path}: truncated checkpoint config")
        try:
            config = NetworkConfig.from_dict(json.loads(blob.decode("utf-8")))
        except (json.JSONDecodeError, KeyError, ConfigError) as e:
            raise FormatError(f"{path}: invalid checkpoint config: {e}") from e
        net = build_network(config)
        for name, param in net.params.items():
            loaded = read_tensor_stream(fh, context=f"{path}:{name}")
            if loaded.shape != param.shape:
                raise FormatError(
                    f"{path}: parameter {name} has shape {loaded.shape}, expected {param.shape}"
                )
            param.data = loaded.data
        extra = fh.read(1)
        if extra:
            raise FormatError(f"{path}: trailing bytes after parameters")
    return net
