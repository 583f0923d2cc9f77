"""Batch normalization, train-time folding into a conv kernel, and
statistics estimation from input moments and kernel sums."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "BNState",
    "bn_forward",
    "bn_fold",
    "update_running",
    "bn_est_mean",
    "bn_est_var",
    "bn_est_forward",
    "batch_stats",
]


@dataclass
class BNState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in (0, 1], got {self.momentum}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5) -> "BNState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def batch_stats(y: Tensor) -> tuple[Tensor, Tensor]:
    return T.mean_bhd(y), T.var_bhd(y)


def update_running(st: BNState, mu, var) -> None:
    """Momentum update of the running statistics (gradient-free)."""
    mu = mu.data if isinstance(mu, Tensor) else np.asarray(mu)
    var = var.data if isinstance(var, Tensor) else np.asarray(var)
    m = st.momentum
    st.running_mean = ((1.0 - m) * st.running_mean + m * mu).astype(st.running_mean.dtype)
    st.running_var = ((1.0 - m) * st.running_var + m * var).astype(st.running_var.dtype)


def _running(st: BNState) -> tuple[Tensor, Tensor]:
    return Tensor(st.running_mean, check=False), Tensor(st.running_var, check=False)


def bn_forward(y: Tensor, st: BNState, mode: str = "train", update: bool = True) -> Tensor:
    """Normalize ``y`` per channel; train mode also updates running stats."""
    _check_mode(mode)
    if y.ndim != 4:
        raise T.ShapeError(f"bn_forward expects a rank-4 input, got {y.shape}")
    if y.shape[-1] != st.channels:
        raise T.ShapeError(f"bn_forward: input has {y.shape[-1]} channels, BN has {st.channels}")
    if mode == "train":
        mu, var = batch_stats(y)
        if update:
            update_running(st, mu, var)
    else:
        mu, var = _running(st)
    inv = st.gamma / T.sqrt(var + st.eps)
    return (y - mu) * inv + st.beta


def bn_fold(w: Tensor, mu, var, st: BNState) -> tuple[Tensor, Tensor]:
    """Fold normalization into the kernel: ``M = W*g/sqrt(V+eps)``, ``b = beta - mu*g/sqrt(V+eps)``."""
    mu = T._as_tensor(mu)
    var = T._as_tensor(var)
    if w.shape[-1] != st.channels or mu.shape != (st.channels,) or var.shape != (st.channels,):
        raise T.ShapeError(
            f"bn_fold: kernel {w.shape}, mean {mu.shape}, var {var.shape} vs {st.channels} channels")
    if np.any(var.data + st.eps <= 0):
        raise ValueError("bn_fold: var + eps must be positive")
    scale = st.gamma / T.sqrt(var + st.eps)
    return w * scale, st.beta - mu * scale


def _row(v: Tensor) -> Tensor:
    return T.reshape(v, (1, v.shape[0]))


def _check_est_args(x: Tensor, w: Tensor) -> None:
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise T.ShapeError(f"estimate needs x [B,H,D,IN] and w [Kh,Kw,IN,OUT]; got {x.shape}, {w.shape}")


def bn_est_mean(x: Tensor, w: Tensor) -> Tensor:
    """Per-output-channel mean of ``x * w`` estimated as ``E[x] @ sum_hd W``."""
    _check_est_args(x, w)
    return T.reshape(T.matmul(_row(T.mean_bhd(x)), T.sum_spatial(w)), (w.shape[-1],))


def bn_est_var(x: Tensor, w: Tensor) -> Tensor:
    """Per-output-channel variance of ``x * w`` under a diagonal input covariance:
    ``V[x] @ sum_hd W**2``. Non-negative by construction."""
    _check_est_args(x, w)
    return T.reshape(T.matmul(_row(T.var_bhd(x)), T.sum_spatial(T.square(w))), (w.shape[-1],))


def bn_est_forward(x: Tensor, w: Tensor, st: BNState, mode: str = "train",
                   update: bool = True) -> tuple[Tensor, Tensor]:
    """Fold BN into ``w`` using estimated statistics; the conv output is never formed."""
    _check_mode(mode)
    if mode == "train":
        mu, var = bn_est_mean(x, w), bn_est_var(x, w)
        if update:
            update_running(st, mu, var)
    else:
        mu, var = _running(st)
    return bn_fold(w, mu, var, st)
