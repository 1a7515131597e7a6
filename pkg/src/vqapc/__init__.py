"""VQ-APC: autoregressive future-frame prediction with a Gumbel-Softmax
vector-quantization bottleneck, plus its probing and co-occurrence
analysis stack."""

from .errors import ConfigError, DataError, NumericsError, VqApcError
from .features import FeatureSequence, MelConfig, Utterance, log_mel, normalize_per_speaker
from .model import (
    Codebook,
    ForwardTrace,
    ModelConfig,
    VqApcModel,
    apc_forward,
    apc_loss,
    extract_features,
    gru_forward,
    vq_forward_eval,
    vq_forward_train,
    vq_logits,
)
from .numerics import AdamState, Tensor, adam_step, grad_check
from .training import TrainConfig, TrainState, make_batches, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Codebook",
    "ConfigError",
    "DataError",
    "FeatureSequence",
    "ForwardTrace",
    "MelConfig",
    "ModelConfig",
    "NumericsError",
    "Tensor",
    "TrainConfig",
    "TrainState",
    "Utterance",
    "VqApcError",
    "VqApcModel",
    "adam_step",
    "apc_forward",
    "apc_loss",
    "extract_features",
    "grad_check",
    "gru_forward",
    "log_mel",
    "make_batches",
    "normalize_per_speaker",
    "train",
    "vq_forward_eval",
    "vq_forward_train",
    "vq_logits",
]
