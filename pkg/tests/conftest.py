"""Shared fixtures for the flowpose test suite."""

import numpy as np
import pytest

from flowpose.network import LayerSpec, NetworkConfig, conv_spec


def make_toy_config(joint_count=2, fusion=True, size=(16, 16)) -> NetworkConfig:
    """Small config with the default topology: fast enough for gradchecks."""
    spatial = (
        [conv_spec("conv1", 3, 4), LayerSpec("relu1", "relu"), LayerSpec("pool1", "maxpool2")]
        + [conv_spec("conv2", 3, 6), LayerSpec("relu2", "relu"), LayerSpec("pool2", "maxpool2")]
        + [conv_spec("conv3", 3, 6), LayerSpec("relu3", "relu")]
        + [conv_spec("conv7", 1, 8), LayerSpec("relu7", "relu")]
        + [conv_spec("conv8", 1, joint_count), LayerSpec("relu8", "relu")]
    )
    fusion_layers = ()
    if fusion:
        fusion_layers = (
            LayerSpec("fuse_concat", "concat-skip", skip_source=("conv7", "conv3")),
            conv_spec("conv_f1", 3, 5),
            LayerSpec("relu_f1", "relu"),
            conv_spec("conv_f2", 1, 5),
            LayerSpec("relu_f2", "relu"),
            conv_spec("conv_f3", 1, 5),
            LayerSpec("relu_f3", "relu"),
            conv_spec("conv_f4", 1, 5),
            LayerSpec("relu_f4", "relu"),
            conv_spec("conv_f5", 1, joint_count),
            LayerSpec("relu_f5", "relu"),
        )
    return NetworkConfig(
        input_size=size,
        joint_count=joint_count,
        spatial_layers=tuple(spatial),
        fusion_layers=fusion_layers,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def toy_config():
    return make_toy_config


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: long-running acceptance criteria (see test_acceptance.py)"
    )
