"""Quantization-aware training of re-parametrized convolution blocks."""

from .batchnorm import BNState, bn_est_forward, bn_fold, bn_forward
from .quant import QuantizerState, min_error_init, product_bits, quantize
from .reparam import ReparamBlock, block_forward_expanded, make_block, merged_weight
from .tensor import Tensor, conv2d

__version__ = "0.1.0"

__all__ = [
    "Tensor", "conv2d", "BNState", "bn_forward", "bn_fold", "bn_est_forward",
    "ReparamBlock", "make_block", "merged_weight", "block_forward_expanded",
    "QuantizerState", "quantize", "min_error_init", "product_bits",
]
