"""Re-parametrized convolution blocks and their differentiable merged kernel.

A block is a set of parallel branches, each a short sequence of primitive
layers.  :func:`merged_weight` turns the whole block into one kernel ``M``
and bias ``b`` such that ``block(x) == conv2d(x, M, "same") + b``.  All
branch convolutions use same padding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import batchnorm as bn
from . import tensor as T
from .tensor import Tensor

__all__ = [
    "Conv",
    "BN",
    "Scale",
    "Identity",
    "Branch",
    "ReparamBlock",
    "TOPOLOGIES",
    "merge_parallel",
    "merge_sequential",
    "identity_kernel",
    "merged_weight",
    "block_forward_expanded",
    "make_block",
    "CompositionError",
]


class CompositionError(ValueError):
    """Raised for kernel compositions that have no exact single-kernel form."""


@dataclass
class Conv:
    weight: Tensor

    @property
    def in_channels(self) -> int:
        return self.weight.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[3]


@dataclass
class BN:
    state: bn.BNState


@dataclass
class Scale:
    scale: Tensor


@dataclass
class Identity:
    pass


Layer = Union[Conv, BN, Scale, Identity]


@dataclass
class Branch:
    layers: list[Layer]

    def channels(self, in_channels: int) -> int:
        c = in_channels
        for layer in self.layers:
            if isinstance(layer, Conv):
                if layer.in_channels != c:
                    raise T.ShapeError(f"branch conv expects {layer.in_channels} channels, gets {c}")
                c = layer.out_channels
            elif isinstance(layer, BN) and layer.state.channels != c:
                raise T.ShapeError(f"branch BN has {layer.state.channels} channels, gets {c}")
            elif isinstance(layer, Scale) and layer.scale.shape != (c,):
                raise T.ShapeError(f"branch scale has shape {layer.scale.shape}, gets {c} channels")
        return c

    def kernel_size(self) -> tuple[int, int]:
        kh = kw = 1
        for layer in self.layers:
            if isinstance(layer, Conv):
                h, w = layer.weight.shape[:2]
                kh, kw = kh + h - 1, kw + w - 1
        return kh, kw


@dataclass
class ReparamBlock:
    branches: list[Branch]
    in_channels: int
    out_channels: int
    target_kernel: tuple[int, int] = (3, 3)
    bias: Tensor | None = None
    topology: str = "custom"

    def __post_init__(self):
        if not self.branches:
            raise ValueError("a block needs at least one branch")
        kh, kw = self.target_kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"target kernel must have odd sizes, got {self.target_kernel}")
        for br in self.branches:
            if br.channels(self.in_channels) != self.out_channels:
                raise T.ShapeError(f"branch ends with the wrong channel count in {self.topology}")
            bh, bw = br.kernel_size()
            if bh > kh or bw > kw:
                raise ValueError(f"branch kernel {bh}x{bw} exceeds target {self.target_kernel}")
            n_big = sum(1 for l in br.layers if isinstance(l, Conv) and l.weight.shape[:2] != (1, 1))
            if n_big > 1:
                raise CompositionError("at most one non-1x1 convolution per branch")

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, br in enumerate(self.branches):
            for j, layer in enumerate(br.layers):
                p = f"b{i}.l{j}"
                if isinstance(layer, Conv):
                    out.append((f"{p}.weight", layer.weight))
                elif isinstance(layer, BN):
                    out += [(f"{p}.gamma", layer.state.gamma), (f"{p}.beta", layer.state.beta)]
                elif isinstance(layer, Scale):
                    out.append((f"{p}.scale", layer.scale))
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def bn_states(self) -> list[tuple[str, bn.BNState]]:
        return [(f"b{i}.l{j}", layer.state)
                for i, br in enumerate(self.branches)
                for j, layer in enumerate(br.layers) if isinstance(layer, BN)]

    @property
    def has_bn(self) -> bool:
        return bool(self.bn_states())


# --------------------------------------------------------------------------
# kernel algebra

def identity_kernel(channels: int, target: tuple[int, int] = (1, 1), dtype=np.float64) -> Tensor:
    """Dirac kernel: ``conv2d(x, K, "same") == x``."""
    if channels <= 0:
        raise ValueError(f"channels must be positive, got {channels}")
    kh, kw = target
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"identity kernel needs odd sizes, got {target}")
    k = np.zeros((kh, kw, channels, channels), dtype=dtype)
    k[kh // 2, kw // 2] = np.eye(channels, dtype=dtype)
    return Tensor(k)


def _pad_to(w: Tensor, target: tuple[int, int]) -> Tensor:
    kh, kw = w.shape[:2]
    th, tw = target
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"cannot center an even-sized kernel {kh}x{kw}")
    if kh > th or kw > tw:
        raise ValueError(f"kernel {kh}x{kw} does not fit in {th}x{tw}")
    ph, pw = (th - kh) // 2, (tw - kw) // 2
    return T.pad(w, ((ph, ph), (pw, pw), (0, 0), (0, 0)))


def merge_parallel(kernels: list[Tensor], target: tuple[int, int]) -> Tensor:
    """Center-pad each kernel to ``target`` and sum them."""
    if not kernels:
        raise ValueError("merge_parallel needs at least one kernel")
    io = kernels[0].shape[2:]
    for k in kernels:
        if k.shape[2:] != io:
            raise T.ShapeError(f"parallel kernels disagree on channels: {k.shape} vs {io}")
    return T.stack_sum([_pad_to(k, target) for k in kernels])


def merge_sequential(w_first: Tensor, w_second: Tensor) -> Tensor:
    """Kernel of ``conv(conv(x, w_first), w_second)``; one side must be 1x1."""
    if w_first.shape[3] != w_second.shape[2]:
        raise T.ShapeError(f"inner channels disagree: {w_first.shape} then {w_second.shape}")
    if w_second.shape[:2] == (1, 1):
        kh, kw, cin, cmid = w_first.shape
        flat = T.reshape(w_first, (kh * kw * cin, cmid))
        mixed = T.matmul(flat, T.reshape(w_second, w_second.shape[2:]))
        return T.reshape(mixed, (kh, kw, cin, w_second.shape[3]))
    if w_first.shape[:2] == (1, 1):
        kh, kw, cmid, cout = w_second.shape
        # result[i, j, c, o] = sum_m w_first[c, m] * w_second[i, j, m, o]
        moved = T.reshape(T.transpose(w_second, (2, 0, 1, 3)), (cmid, kh * kw * cout))
        mixed = T.matmul(T.reshape(w_first, w_first.shape[2:]), moved)
        cin = w_first.shape[2]
        return T.transpose(T.reshape(mixed, (cin, kh, kw, cout)), (1, 2, 0, 3))
    raise CompositionError("sequential merge needs at least one 1x1 kernel")


# --------------------------------------------------------------------------
# block evaluation

def _affine_stats(x: Tensor, kernel: Tensor | None, shift: Tensor | None, how: str):
    """Mean/variance of ``conv(x, kernel) + shift`` (kernel None = identity)."""
    if kernel is None:
        mu, var = T.mean_bhd(x), T.var_bhd(x)
    elif how == "estimate":
        mu, var = bn.bn_est_mean(x, kernel), bn.bn_est_var(x, kernel)
    else:
        y = T.conv2d(x, kernel, "same")
        mu, var = T.mean_bhd(y), T.var_bhd(y)
    if shift is not None:
        mu = mu + shift
    return mu, var


def _fold_branch(branch: Branch, x: Tensor | None, in_channels: int, mode: str,
                 stats: str, update: bool, dtype) -> tuple[Tensor, Tensor | None]:
    kernel: Tensor | None = None
    shift: Tensor | None = None
    for layer in branch.layers:
        if isinstance(layer, Identity):
            continue
        if isinstance(layer, Conv):
            w = layer.weight
            if kernel is None:
                kernel = w
                continue
            if shift is not None:
                if w.shape[:2] != (1, 1):
                    raise CompositionError("a bias can only pass through a following 1x1 conv")
                # b' = b @ W2
                shift = T.reshape(T.matmul(T.reshape(shift, (1, -1)), T.reshape(w, w.shape[2:])),
                                  (w.shape[3],))
            kernel = merge_sequential(kernel, w)
        elif isinstance(layer, Scale):
            if kernel is None:
                kernel = identity_kernel(in_channels, dtype=dtype)
            kernel = kernel * layer.scale
            shift = None if shift is None else shift * layer.scale
        elif isinstance(layer, BN):
            st = layer.state
            if mode == "train":
                if x is None:
                    raise ValueError("train-mode folding of a BN branch needs the block input")
                mu, var = _affine_stats(x, kernel, shift, stats)
                if update:
                    bn.update_running(st, mu, var)
            else:
                mu, var = bn._running(st)
            if kernel is None:
                kernel = identity_kernel(in_channels, dtype=dtype)
            # BN(conv + c) = conv*s + (c - mu)*s + beta, where mu already includes c
            folded, b = bn.bn_fold(kernel, mu, var, st)
            if shift is not None:
                b = b + shift * (st.gamma / T.sqrt(T._as_tensor(var) + st.eps))
            kernel, shift = folded, b
    if kernel is None:
        kernel = identity_kernel(in_channels, dtype=dtype)
    return kernel, shift


def merged_weight(block: ReparamBlock, x: Tensor | None = None, mode: str = "eval",
                  stats: str = "exact", update: bool = True) -> tuple[Tensor, Tensor]:
    """Single-conv kernel ``M`` and bias ``b`` equivalent to ``block``.

    ``stats`` selects how train-mode BN statistics are obtained: ``"exact"``
    convolves the input, ``"estimate"`` uses input moments and kernel sums.
    """
    if stats not in ("exact", "estimate"):
        raise ValueError(f"unknown stats mode {stats!r}")
    dtype = _block_dtype(block)
    kernels, biases = [], []
    for br in block.branches:
        k, s = _fold_branch(br, x, block.in_channels, mode, stats, update, dtype)
        kernels.append(k)
        if s is not None:
            biases.append(s)
    M = merge_parallel(kernels, block.target_kernel)
    if block.bias is not None:
        biases.append(block.bias)
    b = T.stack_sum(biases) if biases else Tensor(np.zeros(block.out_channels, dtype=dtype))
    return M, b


def _block_dtype(block: ReparamBlock):
    for _, p in block.parameters():
        return p.dtype
    return np.float64


def block_forward_expanded(block: ReparamBlock, x: Tensor, mode: str = "eval",
                           update: bool = True) -> Tensor:
    """Literal branch-by-branch evaluation; reference semantics for the merged path."""
    outs = []
    for br in block.branches:
        y = x
        for layer in br.layers:
            if isinstance(layer, Conv):
                y = T.conv2d(y, layer.weight, "same")
            elif isinstance(layer, BN):
                y = bn.bn_forward(y, layer.state, mode, update=update)
            elif isinstance(layer, Scale):
                y = y * layer.scale
        outs.append(y)
    out = T.stack_sum(outs)
    if block.bias is not None:
        out = out + block.bias
    return out


# --------------------------------------------------------------------------
# catalogue

TOPOLOGIES = ("plain", "conv_bn", "conv_identity", "acnet", "repvgg", "chain")


def _he(rng: np.random.Generator, shape, dtype, gain: float = 1.0) -> Tensor:
    fan_in = shape[0] * shape[1] * shape[2]
    w = rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    return Tensor(w, requires_grad=True)


def make_block(topology: str, in_channels: int, out_channels: int, rng: np.random.Generator,
               kernel: int = 3, dtype=np.float32, momentum: float = 0.1,
               eps: float = 1e-5) -> ReparamBlock:
    """Build one of the catalogued block topologies with fresh parameters.

    ``repvgg`` drops its identity branch when the channel counts differ.
    """
    def conv(kh, kw, cin=in_channels, cout=out_channels, gain=1.0):
        return Conv(_he(rng, (kh, kw, cin, cout), dtype, gain))

    def norm(c=out_channels):
        return BN(bn.BNState.create(c, dtype=dtype, momentum=momentum, eps=eps))

    k = kernel
    if topology == "plain":
        branches = [Branch([conv(k, k)])]
    elif topology == "conv_bn":
        branches = [Branch([conv(k, k), norm()])]
    elif topology == "conv_identity":
        if in_channels != out_channels:
            raise ValueError("conv_identity needs equal in/out channels")
        branches = [Branch([conv(k, k, gain=0.5)]), Branch([Identity()])]
    elif topology == "acnet":
        branches = [Branch([conv(k, k), norm()]),
                    Branch([conv(1, k), norm()]),
                    Branch([conv(k, 1), norm()])]
    elif topology == "repvgg":
        branches = [Branch([conv(k, k), norm()]), Branch([conv(1, 1), norm()])]
        if in_channels == out_channels:
            branches.append(Branch([Identity(), norm()]))
    elif topology == "chain":
        branches = [Branch([conv(k, k), norm(), conv(1, 1, out_channels, out_channels), norm()])]
    else:
        raise ValueError(f"unknown topology {topology!r}; choose from {TOPOLOGIES}")
    return ReparamBlock(branches, in_channels, out_channels, (k, k), topology=topology)
