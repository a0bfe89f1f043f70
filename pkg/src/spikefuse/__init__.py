"""Spiking CNN toolkit for event-camera and depth gesture recognition."""

from .encoder import EncoderConfig, bin_events, depth_polarity, encode_depth, ttfs_delay
from .errors import (
    BoundsError,
    CheckpointError,
    ConfigError,
    DomainError,
    NumericError,
    ParseError,
    ShapeError,
    SpikeFuseError,
    TrainingDiverged,
    UsageError,
)
from .network import (
    FusionConfig,
    FusionNetwork,
    LayerSpec,
    Network,
    NetworkConfig,
    default_layers,
    forward,
    fusion_forward,
    init_fusion_from_subnets,
)
from .neuron import LifParams, LifState, lif_backward, lif_forward, lif_step, surrogate_grad
from .spikes import DepthSequence, EventStream, RateVector, SpikeTensor, concat_channels, spike_count, spike_rate
from .training import (
    EncodedSet,
    Metrics,
    TargetRateSpec,
    TrainConfig,
    backward,
    evaluate,
    predict,
    sgd_step,
    spike_rate_loss,
    target_rate,
    train,
)

__version__ = "0.1.0"
