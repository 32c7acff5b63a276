"""ConvMixFormer: a convolutional token-mixer transformer encoder on a small numpy autodiff core."""

from .model import (
    FFNVariant,
    ModelConfig,
    ModelParams,
    classify_sequence,
    count_macs,
    count_params,
    count_params_vanilla,
    encoder_forward,
    init_model,
    stage_forward,
)
from .tensor import Tensor

__version__ = "0.1.0"
