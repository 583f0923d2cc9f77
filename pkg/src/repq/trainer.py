"""Two-stage pipeline: full-precision pre-training, conversion, then QAT.

Strategies (which stage sees re-parametrized blocks):

=========  ==================  ==================
strategy   FP stage            QAT stage
=========  ==================  ==================
plain      regular             regular
merged     re-parametrized     regular
repq       re-parametrized     re-parametrized
=========  ==================  ==================
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, batches
from .model import BN_MODES, ConvLayer, Model, build_model
from .quant import STEP_FLOOR, QuantizerState
from .reparam import Branch, Conv, ReparamBlock, merged_weight
from .tensor import Tensor

__all__ = [
    "STRATEGIES",
    "StageConfig",
    "StrategyConfig",
    "RunMetrics",
    "Checkpoint",
    "TrainingDiverged",
    "SGD",
    "train_fp",
    "convert_for_qat",
    "attach_quantizers",
    "train_qat",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

log = logging.getLogger(__name__)

STRATEGIES = {
    "plain": ("regular", "regular"),
    "merged": ("reparametrized", "regular"),
    "repq": ("reparametrized", "reparametrized"),
}
CHECKPOINT_VERSION = 1
FP_BITS = 32


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class StageConfig:
    epochs: int = 4
    batch_size: int = 64
    lr: float = 0.05
    weight_decay: float = 5e-4
    momentum: float = 0.9
    bn_momentum: float = 0.1
    steps_lr_ratio: float = 0.1
    max_steps: int | None = None


@dataclass
class StrategyConfig:
    name: str = "repq"
    bn_mode: str = "exact_fold"
    topology: str = "repvgg"
    layer_topologies: list[str] | None = None
    layer_bits: dict[int, int] = field(default_factory=dict)
    use_bn_est: dict[int, bool] = field(default_factory=dict)
    keep_bn_last: int = 0

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; choose from {sorted(STRATEGIES)}")
        if self.bn_mode not in BN_MODES:
            raise ValueError(f"unknown bn_mode {self.bn_mode!r}; choose from {BN_MODES}")

    @property
    def fp_stage(self) -> str:
        return STRATEGIES[self.name][0]

    @property
    def qat_stage(self) -> str:
        return STRATEGIES[self.name][1]

    @property
    def label(self) -> str:
        """Table-style name, e.g. ``repq-bnest``."""
        if self.name != "repq" or self.bn_mode == "none":
            return self.name
        return "repq-bn" if self.bn_mode == "exact_fold" else "repq-bnest"

    def fp_topologies(self, n_layers: int) -> list[str]:
        if self.fp_stage == "regular":
            return ["plain" if self.bn_mode == "none" else "conv_bn"] * n_layers
        if self.layer_topologies is not None:
            if len(self.layer_topologies) != n_layers:
                raise ValueError(f"need {n_layers} layer topologies, got {len(self.layer_topologies)}")
            return list(self.layer_topologies)
        return [self.topology] * n_layers

    def layer_bn_modes(self, n_layers: int) -> list[str]:
        """Per-layer statistics source; plain models always use exact batch statistics."""
        base = "exact_fold" if (self.fp_stage == "regular" and self.bn_mode != "none") else self.bn_mode
        modes = [base] * n_layers
        for i, flag in self.use_bn_est.items():
            modes[i] = "estimate" if flag else "exact_fold"
        for i in range(max(0, n_layers - self.keep_bn_last), n_layers):
            if modes[i] == "estimate":
                modes[i] = "exact_fold"
        return modes


@dataclass
class RunMetrics:
    seed: int
    records: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)  # in memory only, not written out

    def append(self, **record) -> None:
        self.records.append({"seed": self.seed, **record})

    def best(self, stage: str, key: str = "eval_acc") -> float:
        vals = [r[key] for r in self.records if r.get("stage") == stage and key in r]
        return max(vals) if vals else float("nan")

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path: str | Path) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    meta: dict


# --------------------------------------------------------------------------
# optimizer

class SGD:
    """SGD with heavy-ball momentum and decoupled per-group learning-rate multipliers."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, steps_lr_ratio: float = 1.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params}
        self.lr_mult = {name: steps_lr_ratio if name.endswith(".step") else 1.0 for name, _ in params}
        self.decay = {name: weight_decay if name.endswith(("weight", "head.w")) else 0.0
                      for name, _ in params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad + self.decay[name] * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= (lr * self.lr_mult[name]) * v
            if name.endswith(".step"):
                np.maximum(p.data, STEP_FLOOR, out=p.data)


def _cosine(lr: float, step: int, total: int) -> float:
    if total <= 1:
        return lr
    return 0.5 * lr * (1.0 + math.cos(math.pi * step / total))


# --------------------------------------------------------------------------
# evaluation

def evaluate(model: Model, data: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode, with every layer folded once."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    model.freeze()
    try:
        with T.no_grad():
            for xb, yb in batches(data, batch_size):
                logits = model(Tensor(xb.astype(model.head_w.dtype)), "eval")
                correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
    finally:
        model.unfreeze()
    return correct / len(data)


# --------------------------------------------------------------------------
# training loop

def _fit(model: Model, train: Dataset, evalset: Dataset | None, cfg: StageConfig, seed: int,
         stage: str, metrics: RunMetrics, lr: float, calibrate_first: bool = False,
         check_every: int | None = None) -> dict:
    params = model.parameters()
    opt = SGD(params, lr, cfg.momentum, cfg.weight_decay, cfg.steps_lr_ratio)
    rng = np.random.default_rng(seed + 7919)
    steps_per_epoch = max(1, len(train) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    step = 0
    best = {"eval_acc": -1.0, "state": model.state_dict(), "epoch": 0}
    dtype = model.head_w.dtype
    for epoch in range(cfg.epochs):
        if step >= total:
            break
        t0 = time.perf_counter()
        losses = []
        with T.count_ops() as counter:
            for xb, yb in batches(train, cfg.batch_size, rng):
                if step >= total:
                    break
                first = calibrate_first and step == 0
                if first:
                    model.set_calibrate(True)
                check = check_every is not None and step % check_every == 0
                for layer in model.layers:
                    layer.check_equivalence = check
                try:
                    loss = T.cross_entropy(model(Tensor(xb.astype(dtype)), "train"), yb)
                except T.NonFiniteError as exc:
                    raise TrainingDiverged(f"{stage}: non-finite values at step {step}") from exc
                if first:
                    model.set_calibrate(False)
                    opt = SGD(model.parameters(), lr, cfg.momentum, cfg.weight_decay, cfg.steps_lr_ratio)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"{stage}: loss became {loss.item()} at step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step(_cosine(lr, step, total))
                losses.append(loss.item())
                metrics.step_losses.append(losses[-1])
                step += 1
        for layer in model.layers:
            layer.check_equivalence = False
        record = dict(stage=stage, epoch=epoch + 1, step=step,
                      train_loss=float(np.mean(losses)) if losses else float("nan"),
                      wall_time=time.perf_counter() - t0, mults=counter.total)
        errs = [e for layer in model.layers for e in layer.equivalence_errors]
        if errs:
            record["equiv_max_err"] = max(errs)
            for layer in model.layers:
                layer.equivalence_errors.clear()
        if evalset is not None:
            record["eval_acc"] = evaluate(model, evalset)
            if record["eval_acc"] > best["eval_acc"]:
                best = {"eval_acc": record["eval_acc"], "state": model.state_dict(), "epoch": epoch + 1}
        metrics.append(**record)
        log.info("%s epoch %d loss %.4f acc %s", stage, epoch + 1, record["train_loss"],
                 record.get("eval_acc"))
    return best


def train_fp(model: Model, train: Dataset, cfg: StageConfig, seed: int = 0,
             evalset: Dataset | None = None, metrics: RunMetrics | None = None,
             fp_stage: str = "reparametrized", check_every: int | None = None) -> Checkpoint:
    """Full-precision stage; returns the final parameters and BN running stats."""
    metrics = metrics if metrics is not None else RunMetrics(seed)
    best = _fit(model, train, evalset, cfg, seed, "fp", metrics, cfg.lr, check_every=check_every)
    meta = dict(version=CHECKPOINT_VERSION, stage="fp", fp_stage=fp_stage, arch=model.arch,
                topologies=model.topologies, seed=seed, best_eval_acc=best["eval_acc"],
                best_epoch=best["epoch"])
    return Checkpoint(model.state_dict(), meta)


def _merge_layer(layer: ConvLayer) -> ConvLayer:
    with T.no_grad():
        M, b = merged_weight(layer.block, None, "eval")
    blk = layer.block
    merged = ReparamBlock([Branch([Conv(Tensor(M.data.copy(), requires_grad=True))])],
                          blk.in_channels, blk.out_channels, blk.target_kernel,
                          bias=Tensor(b.data.copy(), requires_grad=True), topology="merged")
    return ConvLayer(merged, bn_mode="none")


def attach_quantizers(model: Model, bits: int, layer_bits: dict[int, int] | None = None) -> Model:
    """Add uninitialized weight (per-OUT-channel, signed) and activation (scalar) quantizers.

    ``bits == 32`` leaves a layer unquantized.  The first layer's activation
    quantizer is signed (raw inputs); later ones are unsigned (post-ReLU).
    """
    layer_bits = layer_bits or {}
    for i, layer in enumerate(model.layers):
        b = layer_bits.get(i, bits)
        if b >= FP_BITS:
            layer.wq = layer.aq = None
            continue
        layer.wq = QuantizerState(b, signed=True, channel_axis=-1)
        layer.aq = QuantizerState(b, signed=(i == 0), channel_axis=None)
    return model


def convert_for_qat(ckpt: Checkpoint, strategy: StrategyConfig, bits: int, seed: int = 0,
                    in_channels: int = 1, num_classes: int = 10, dtype=np.float32,
                    bn_momentum: float = 0.1) -> Model:
    """Build the QAT model from an FP checkpoint according to the strategy."""
    arch = ckpt.meta["arch"]
    if ckpt.meta.get("fp_stage") != strategy.fp_stage:
        raise ValueError(f"checkpoint trained with fp_stage={ckpt.meta.get('fp_stage')!r}, "
                         f"strategy {strategy.name!r} expects {strategy.fp_stage!r}")
    n = len(ckpt.meta["topologies"])
    topologies = strategy.fp_topologies(n)
    if topologies != ckpt.meta["topologies"]:
        raise ValueError(f"topology mismatch: checkpoint {ckpt.meta['topologies']} vs strategy {topologies}")
    model = build_model(arch, topologies, seed, in_channels, num_classes,
                        strategy.layer_bn_modes(n), dtype, bn_momentum)
    model.load_state_dict(ckpt.state)
    if strategy.name == "merged":
        model.layers = [_merge_layer(layer) for layer in model.layers]
    return attach_quantizers(model, bits, strategy.layer_bits)


def train_qat(model: Model, train: Dataset, cfg: StageConfig, seed: int = 0,
              evalset: Dataset | None = None, metrics: RunMetrics | None = None,
              stage: str = "qat", check_every: int | None = None) -> tuple[Checkpoint, RunMetrics]:
    """QAT stage; quantizers are MinError-initialized on the first batch.

    ``cfg.lr`` is used as given; callers scale it from the FP rate.
    """
    metrics = metrics if metrics is not None else RunMetrics(seed)
    best = _fit(model, train, evalset, cfg, seed, stage, metrics, cfg.lr,
                calibrate_first=True, check_every=check_every)
    meta = dict(version=CHECKPOINT_VERSION, stage=stage, arch=model.arch, topologies=model.topologies,
                seed=seed, best_eval_acc=best["eval_acc"], best_epoch=best["epoch"])
    return Checkpoint(model.state_dict(), meta), metrics


# --------------------------------------------------------------------------
# checkpoint files

def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write a flat name -> array map (``.npz``, little-endian) plus a JSON ``__meta__`` entry."""
    arrays = {}
    for k, v in ckpt.state.items():
        v = np.asarray(v)
        arrays[k] = v.astype(v.dtype.newbyteorder("<"))
    arrays["__meta__"] = np.frombuffer(json.dumps(ckpt.meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        state = {k: z[k].astype(z[k].dtype.newbyteorder("=")) for k in z.files if k != "__meta__"}
    return Checkpoint(state, meta)
