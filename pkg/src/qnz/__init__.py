"""Desk-scale model compression toolkit.

Fixed-point scalar quantization, product quantization (plain and layer
sequential with teacher finetuning), a training-time quantization-noise
operator, a small differentiable network core to exercise them end to end,
and byte-exact serialization with size accounting.
"""

from .numerics import Rng, as_matrix, frobenius_sq, matmul
from .quant_noise import BlockMask, NoiseSpec, apply_noise, select_blocks
from .quant_pq import BlockLayout, Codebook, kmeans_fit, storage_bits
from .quant_scalar import (
    ActivationObserver,
    ChannelQuantParams,
    QuantParams,
    calibrate_histogram,
    calibrate_minmax,
    calibrate_per_channel,
    fake_quant,
    quantize_tensor,
)
from .tensors import CompressedTensor, dequantize_tensor
from .train_core import Dataset, Network, TrainConfig, forward, train

__all__ = [
    "ActivationObserver",
    "BlockLayout",
    "BlockMask",
    "ChannelQuantParams",
    "Codebook",
    "CompressedTensor",
    "Dataset",
    "Network",
    "NoiseSpec",
    "QuantParams",
    "Rng",
    "TrainConfig",
    "apply_noise",
    "as_matrix",
    "calibrate_histogram",
    "calibrate_minmax",
    "calibrate_per_channel",
    "dequantize_tensor",
    "fake_quant",
    "forward",
    "frobenius_sq",
    "kmeans_fit",
    "matmul",
    "quantize_tensor",
    "select_blocks",
    "storage_bits",
    "train",
]
__version__ = "0.1.0"
