"""Toy classification networks built from re-parametrized conv layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .quant import QuantizerState, min_error_init, quantize
from .reparam import ReparamBlock, block_forward_expanded, make_block, merged_weight
from .tensor import Tensor

__all__ = ["ConvLayer", "Model", "build_model", "ARCHITECTURES", "BN_MODES"]

BN_MODES = ("exact_fold", "estimate", "none")

# widths, pool-after indices, residual
ARCHITECTURES = {
    "minivgg": ((16, 32, 64, 64), (1,), False),
    "miniresnet": ((16, 32, 64, 64), (1,), True),
}


@dataclass
class ConvLayer:
    """One re-parametrized layer evaluated through its merged kernel.

    Forward computes ``conv(Q(x), Q(M)) + b`` where ``M, b`` come from
    :func:`merged_weight`; quantizers are optional.
    """
    block: ReparamBlock
    bn_mode: str = "exact_fold"
    wq: QuantizerState | None = None
    aq: QuantizerState | None = None
    calibrate: bool = False
    check_equivalence: bool = False
    force_merged: bool = False  # train through M even when unquantized with exact BN
    equivalence_errors: list[float] = field(default_factory=list)
    _frozen: tuple[Tensor, Tensor] | None = None

    def __post_init__(self):
        if self.bn_mode not in BN_MODES:
            raise ValueError(f"bn_mode must be one of {BN_MODES}, got {self.bn_mode!r}")

    @property
    def stats(self) -> str:
        return "estimate" if self.bn_mode == "estimate" else "exact"

    def kernel(self, x: Tensor | None, mode: str) -> tuple[Tensor, Tensor]:
        M, b = merged_weight(self.block, x, mode, self.stats)
        if self.wq is not None:
            if not self.wq.initialized and self.calibrate:
                min_error_init(M, self.wq)
            M = quantize(M, self.wq)
        return M, b

    def freeze(self) -> None:
        with T.no_grad():
            self._frozen = self.kernel(None, "eval")

    def unfreeze(self) -> None:
        self._frozen = None

    @property
    def quantized(self) -> bool:
        return self.wq is not None or self.aq is not None

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        if mode == "eval" and self._frozen is not None:
            M, b = self._frozen
        elif mode == "train" and not (self.quantized or self.force_merged) and self.bn_mode == "exact_fold":
            # regular BN training: the merged kernel would need the branch convs anyway
            if self.check_equivalence:
                self._record_equivalence(x)
            return block_forward_expanded(self.block, x, "train")
        else:
            if self.check_equivalence and mode == "train":
                self._record_equivalence(x)
            M, b = self.kernel(x, mode)
        if self.aq is not None:
            if not self.aq.initialized and self.calibrate:
                min_error_init(x, self.aq)
            x = quantize(x, self.aq)
        return T.conv2d(x, M, "same") + b

    def _record_equivalence(self, x: Tensor) -> None:
        with T.no_grad():
            ref = block_forward_expanded(self.block, x, "train", update=False)
            M, b = merged_weight(self.block, x, "train", "exact", update=False)
            merged = T.conv2d(x, M, "same") + b
        self.equivalence_errors.append(float(np.max(np.abs(ref.data - merged.data))))

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.block.parameters())
        if self.wq is not None and self.wq.step is not None:
            out.append(("wq.step", self.wq.step))
        if self.aq is not None and self.aq.step is not None:
            out.append(("aq.step", self.aq.step))
        return out


@dataclass
class Model:
    arch: str
    layers: list[ConvLayer]
    head_w: Tensor
    head_b: Tensor
    pools: tuple[int, ...] = ()
    residual: bool = False

    @property
    def topologies(self) -> list[str]:
        return [layer.block.topology for layer in self.layers]

    def __call__(self, x, mode: str = "train") -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i, layer in enumerate(self.layers):
            out = layer(h, mode)
            if self.residual and i > 0:
                out = out + T.pad_channels(h, out.shape[-1])
            h = T.relu(out)
            if i in self.pools:
                h = T.avg_pool2(h)
        feats = T.global_avg_pool(h)
        return T.matmul(feats, self.head_w) + self.head_b

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.{name}", p) for name, p in layer.parameters()]
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, st in layer.block.bn_states():
                out[f"layers.{i}.{name}.running_mean"] = st.running_mean
                out[f"layers.{i}.{name}.running_var"] = st.running_var
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.parameters()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.parameters())
        expected = set(params) | set(self.buffers())
        missing = expected - set(state)
        unexpected = {k for k in set(state) - expected if not k.endswith(".step")}
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            if p.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} does not match {p.shape}")
            p.data = state[name].astype(p.dtype).copy()
        for i, layer in enumerate(self.layers):
            for name, st in layer.block.bn_states():
                st.running_mean = state[f"layers.{i}.{name}.running_mean"].astype(st.running_mean.dtype).copy()
                st.running_var = state[f"layers.{i}.{name}.running_var"].astype(st.running_var.dtype).copy()

    def freeze(self) -> None:
        for layer in self.layers:
            layer.freeze()

    def unfreeze(self) -> None:
        for layer in self.layers:
            layer.unfreeze()

    def set_calibrate(self, flag: bool) -> None:
        for layer in self.layers:
            layer.calibrate = flag


def build_model(arch: str, topologies: list[str] | str, seed: int, in_channels: int = 1,
                num_classes: int = 10, bn_modes: list[str] | str = "exact_fold",
                dtype=np.float32, bn_momentum: float = 0.1) -> Model:
    """Build ``minivgg`` or ``miniresnet`` with the given per-layer block topologies."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    widths, pools, residual = ARCHITECTURES[arch]
    n = len(widths)
    topologies = [topologies] * n if isinstance(topologies, str) else list(topologies)
    bn_modes = [bn_modes] * n if isinstance(bn_modes, str) else list(bn_modes)
    if len(topologies) != n or len(bn_modes) != n:
        raise ValueError(f"{arch} has {n} layers; got {len(topologies)} topologies, {len(bn_modes)} bn modes")
    rng = np.random.default_rng(seed)
    layers = []
    cin = in_channels
    for topo, mode, cout in zip(topologies, bn_modes, widths):
        block = make_block(topo, cin, cout, rng, dtype=dtype, momentum=bn_momentum)
        layers.append(ConvLayer(block, bn_mode=mode if block.has_bn else "none"))
        cin = cout
    head_w = Tensor(rng.normal(0, np.sqrt(1.0 / cin), (cin, num_classes)).astype(dtype), requires_grad=True)
    head_b = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True)
    return Model(arch, layers, head_w, head_b, pools, residual)
