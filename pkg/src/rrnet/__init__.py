"""Residual networks with temporal skip connections, at desk scale.

The package is a self-contained numpy learning engine: tensor kernels, a
reverse-mode tape, residual blocks with three temporal connection types,
chunked training/inference over synthetic order-sensitive video tasks, two
frame-feature baselines, and a CLI tying it together.
"""

from .autograd import Parameter, Tape, grad_check
from .blocks import (
    SpatialResidualBlock,
    TemporalConnection,
    TemporalResidualBlock,
    downsample_skip,
)
from .data import DatasetSpec, SyntheticVideo, chunk, generate, sample_frames
from .inference import classify_split, classify_video
from .model import (
    ChunkPrediction,
    ChunkSpec,
    NetworkConfig,
    RecurrentResidualNet,
    load_checkpoint,
    save_checkpoint,
    temporal_reachability,
)
from .tensor_ops import (
    BatchNormState,
    ConvSpec,
    ShapeError,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    linear,
    relu,
    softmax_cross_entropy,
    znorm,
)
from .training import AdamState, TrainSchedule, adam_step, evaluate, train

__version__ = "0.1.0"
