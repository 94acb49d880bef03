"""flowpose: video pose estimation with flow-warped temporal heatmap pooling.

A self-contained desk-scale pipeline: a minimal autodiff tensor library, a
fully-convolutional heatmap regressor with a spatial fusion branch, dense
optical flow, warping of neighboring frames' heatmaps to a reference frame,
learnable cross-channel temporal pooling, PCK evaluation, and a synthetic
articulated-puppet data generator that supplies exact ground truth for all
of it.
"""

from .errors import ConfigError, FlowposeError, FormatError, TapeError, TrainingDiverged
from .estimators import CoordinatePoseEstimator, FlowPooledPoseEstimator, HeatmapPoseEstimator
from .evaluation import PckCurve, average_joints, emit_curves, fraction_within, pck
from .flow import (
    FlowField,
    FlowParams,
    bilinear_sample,
    downsample_flow,
    estimate_flow,
    read_flo,
    warp_heatmap,
    write_flo,
)
from .heatmap import (
    DEFAULT_SIGMA,
    FLIP_PAIRS,
    JOINT_NAMES,
    Pose,
    coords_to_heatmap,
    decode_argmax,
    decode_argmax_batch,
    heatmap_to_coords,
    synthesize_target,
)
from .network import (
    LayerSpec,
    Network,
    NetworkConfig,
    build_network,
    decode_coordinate_output,
    default_coordinate_config,
    default_heatmap_config,
    encode_coordinate_target,
    forward_coordinate_baseline,
    forward_spatial,
    load_checkpoint,
    rectify_heatmap,
    save_checkpoint,
)
from .synth import (
    JointSpec,
    PuppetSpec,
    add_label_noise,
    default_puppet,
    generate_dataset,
    generate_sequence,
    load_dataset,
    save_dataset,
    spec_from_json,
    two_mode_puppet,
)
from .temporal import (
    PoolingWeights,
    learn_pooling_weights,
    load_weights_csv,
    pool_max,
    pool_parametric,
    pool_sum,
    save_weights_csv,
)
from .tensor import (
    Tape,
    Tensor,
    avgpool2,
    concat_channels,
    conv2d,
    global_avgpool,
    l2_loss,
    load_tensor,
    maxpool2,
    relu,
    save_tensor,
)
from .train import (
    AugmentParams,
    Dataset,
    OptimizerState,
    TrainConfig,
    TrainResult,
    augment,
    parse_train_config,
    sgd_momentum_step,
    train,
    write_loss_curve,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # errors
    "FlowposeError",
    "FormatError",
    "ConfigError",
    "TapeError",
    "TrainingDiverged",
    # tensor
    "Tensor",
    "Tape",
    "conv2d",
    "relu",
    "maxpool2",
    "avgpool2",
    "global_avgpool",
    "concat_channels",
    "l2_loss",
    "save_tensor",
    "load_tensor",
    # heatmap
    "JOINT_NAMES",
    "FLIP_PAIRS",
    "DEFAULT_SIGMA",
    "Pose",
    "coords_to_heatmap",
    "heatmap_to_coords",
    "synthesize_target",
    "decode_argmax",
    "decode_argmax_batch",
    # network
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
    # flow
    "FlowField",
    "FlowParams",
    "bilinear_sample",
    "estimate_flow",
    "warp_heatmap",
    "downsample_flow",
    "read_flo",
    "write_flo",
    # temporal
    "PoolingWeights",
    "pool_parametric",
    "pool_sum",
    "pool_max",
    "learn_pooling_weights",
    "save_weights_csv",
    "load_weights_csv",
    # train
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
    # eval
    "PckCurve",
    "pck",
    "fraction_within",
    "average_joints",
    "emit_curves",
    # synth
    "JointSpec",
    "PuppetSpec",
    "default_puppet",
    "two_mode_puppet",
    "generate_sequence",
    "generate_dataset",
    "add_label_noise",
    "save_dataset",
    "load_dataset",
    "spec_from_json",
    # estimators
    "HeatmapPoseEstimator",
    "CoordinatePoseEstimator",
    "FlowPooledPoseEstimator",
]
