"""Multiply-count accounting for BN statistics: convolution vs estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import batchnorm as bn
from . import tensor as T
from .model import Model
from .reparam import merged_weight
from .tensor import Tensor

__all__ = ["LayerCost", "stat_costs", "layer_costs", "step_costs"]


@dataclass
class LayerCost:
    layer: int
    topology: str
    in_shape: tuple[int, ...]
    out_channels: int
    exact: int
    estimate: int

    @property
    def ratio(self) -> float:
        return self.estimate / self.exact if self.exact else float("nan")


def stat_costs(x: Tensor, w: Tensor) -> tuple[int, int]:
    """Multiplies spent on (exact, estimated) BN statistics of ``conv2d(x, w)``."""
    with T.no_grad():
        with T.count_ops() as exact:
            bn.batch_stats(T.conv2d(x, w, "valid"))
        with T.count_ops() as est:
            bn.bn_est_mean(x, w)
            bn.bn_est_var(x, w)
    return exact.total, est.total


def layer_costs(model: Model, x: np.ndarray) -> list[LayerCost]:
    """Per-layer statistic costs of folding every block on the batch ``x``.

    Layer inputs come from an eval-mode pass so running statistics are untouched.
    """
    out = []
    h = Tensor(x.astype(model.head_w.dtype))
    with T.no_grad():
        for i, layer in enumerate(model.layers):
            with T.count_ops() as exact:
                merged_weight(layer.block, h, "train", "exact", update=False)
            with T.count_ops() as est:
                merged_weight(layer.block, h, "train", "estimate", update=False)
            out.append(LayerCost(i, layer.block.topology, h.shape, layer.block.out_channels,
                                 exact.total, est.total))
            y = layer(h, "eval")
            if model.residual and i > 0:
                y = y + T.pad_channels(h, y.shape[-1])
            h = T.relu(y)
            if i in model.pools:
                h = T.avg_pool2(h)
    return out


def step_costs(model: Model, x: np.ndarray, labels: np.ndarray, bn_mode: str) -> int:
    """Total multiplies of one forward+backward training step with every layer in ``bn_mode``."""
    saved = [(layer.bn_mode, layer.calibrate) for layer in model.layers]
    for layer in model.layers:
        if layer.block.has_bn:
            layer.bn_mode = bn_mode
        layer.calibrate = True
    try:
        with T.count_ops() as counter:
            loss = T.cross_entropy(model(Tensor(x.astype(model.head_w.dtype)), "train"), labels)
            loss.backward()
    finally:
        for layer, (mode, cal) in zip(model.layers, saved):
            layer.bn_mode, layer.calibrate = mode, cal
        for _, p in model.parameters():
            p.grad = None
    return counter.total
