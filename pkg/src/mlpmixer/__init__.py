"""From-scratch MLP-Mixer: tensors with reverse-mode gradients, the model, weight surgery,
training, probing and visualization."""

from .model import (NAMED_CONFIGS, MixerConfig, flops_per_image, forward, get_config, init_params,
                    param_count, sequence_length)
from .tensor import Tensor, grad

__all__ = ["MixerConfig", "NAMED_CONFIGS", "Tensor", "flops_per_image", "forward", "get_config",
           "grad", "init_params", "param_count", "sequence_length"]
