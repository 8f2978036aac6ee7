"""Selective convolutional autoencoder for early instability detection.

Train a convolutional autoencoder with class-selective targets (stable
frames masked to black, unstable frames reconstructed), then score
unseen frames with a correlation-ratio measure whose smoothed trace
exposes intermittency bursts and the sustained onset of instability.
"""

from .errors import ConfigError, ParseError, ShapeError
from .estimator import SelectiveFrameAutoencoder
from .kernels import ArgmaxMap, ConvKernel, PoolSpec
from .network import (
    Checkpoint,
    LayerSpec,
    Model,
    NetworkConfig,
    build,
    desk_config,
    load_checkpoint,
    paperlike_config,
    save_checkpoint,
)
from .training import LossConfig, TrainConfig, TrainResult, train
from .dataflow import (
    Frame,
    FrameDataset,
    SynthParams,
    load_dataset,
    load_packed,
    make_selective_target,
    normalize,
    resize_bilinear,
    save_dataset,
    save_packed,
    synth_generate,
)
from .analysis import (
    CorrelationRatioResult,
    Event,
    InstabilityTrace,
    analyze_sequence,
    correlation_ratio,
    detect_events,
    smooth_trace,
    soft_labels,
)

__version__ = "0.1.0"

__all__ = [
    "ArgmaxMap",
    "Checkpoint",
    "ConfigError",
    "ConvKernel",
    "CorrelationRatioResult",
    "Event",
    "Frame",
    "FrameDataset",
    "InstabilityTrace",
    "LayerSpec",
    "LossConfig",
    "Model",
    "NetworkConfig",
    "ParseError",
    "PoolSpec",
    "SelectiveFrameAutoencoder",
    "ShapeError",
    "SynthParams",
    "TrainConfig",
    "TrainResult",
    "analyze_sequence",
    "build",
    "correlation_ratio",
    "desk_config",
    "detect_events",
    "load_checkpoint",
    "load_dataset",
    "load_packed",
    "make_selective_target",
    "normalize",
    "paperlike_config",
    "resize_bilinear",
    "save_checkpoint",
    "save_dataset",
    "save_packed",
    "smooth_trace",
    "soft_labels",
    "synth_generate",
    "train",
]
