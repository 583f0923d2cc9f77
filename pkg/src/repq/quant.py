"""LSQ-style pseudo-quantization with learned steps and straight-through gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "QuantizerState",
    "UninitializedQuantizerError",
    "qrange",
    "quantize",
    "min_error_init",
    "grid_candidates",
    "reconstruction_error",
    "product_bits",
    "STEP_FLOOR",
    "GRID_SIZE",
]

STEP_FLOOR = 1e-8
GRID_SIZE = 128


class UninitializedQuantizerError(RuntimeError):
    pass


def qrange(bits: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


@dataclass
class QuantizerState:
    """Integer range plus trainable step(s).

    ``channel_axis=None`` gives one scalar step (activations); otherwise one
    step per slice along that axis (the OUT axis of a kernel).
    """
    bits: int
    signed: bool
    channel_axis: int | None = -1
    step: Tensor | None = None
    initialized: bool = False
    grad_scale: float = 1.0
    degenerate: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")

    @property
    def qmin(self) -> int:
        return qrange(self.bits, self.signed)[0]

    @property
    def qmax(self) -> int:
        return qrange(self.bits, self.signed)[1]


def _step_view(q: QuantizerState, v: Tensor) -> np.ndarray:
    s = q.step.data
    if q.channel_axis is None:
        return s.reshape(())
    axis = q.channel_axis % v.ndim
    shape = [1] * v.ndim
    shape[axis] = v.shape[axis]
    return s.reshape(shape)


def quantize(v: Tensor, q: QuantizerState) -> Tensor:
    """``clamp(round(v/s), qmin, qmax) * s`` with LSQ gradients.

    Rounding is half-to-even.  Inside the clamp range the value gradient is
    passed straight through; outside it is zero.  The step receives
    ``round(v/s) - v/s`` inside and ``qmin``/``qmax`` when saturated, scaled
    by ``grad_scale``.
    """
    if not q.initialized or q.step is None:
        raise UninitializedQuantizerError("quantizer used before initialization")
    if np.any(q.step.data <= 0):
        raise ValueError("quantizer steps must be positive")
    s = _step_view(q, v)
    ratio = v.data / s
    low, high = ratio < q.qmin, ratio > q.qmax
    inside = ~(low | high)
    levels = np.clip(np.round(ratio), q.qmin, q.qmax)
    out = (levels * s).astype(v.dtype)
    step = q.step
    step_shape = step.shape
    axis = None if q.channel_axis is None else q.channel_axis % v.ndim

    def backward(g):
        grads = [(v, g * inside)]
        if step.requires_grad:
            ds = np.where(inside, levels - ratio, levels) * g * q.grad_scale
            if axis is None:
                gs = np.asarray(ds.sum()).reshape(step_shape)
            else:
                other = tuple(i for i in range(v.ndim) if i != axis)
                gs = ds.sum(axis=other).reshape(step_shape)
            grads.append((step, gs.astype(step.dtype)))
        return grads

    return T._make(out, (v, step), "quantize", backward)


def grid_candidates(max_abs: float, qmax: int, n: int = GRID_SIZE) -> np.ndarray:
    """Geometric step grid over ``[max/(16 qmax), 2 max/qmax]`` plus the full-range step ``max/qmax``."""
    lo, hi = max_abs / (qmax * 16.0), 2.0 * max_abs / qmax
    grid = np.geomspace(lo, hi, n)
    return np.unique(np.append(grid, max_abs / qmax))


def reconstruction_error(values: np.ndarray, steps: np.ndarray, qmin: int, qmax: int) -> np.ndarray:
    """Squared quantization error of ``values`` for each candidate step."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    out = np.empty(len(steps))
    for i, s in enumerate(steps):
        rec = np.clip(np.round(values / s), qmin, qmax) * s
        out[i] = np.sum((rec - values) ** 2)
    return out


def min_error_init(v: Tensor | np.ndarray, q: QuantizerState) -> None:
    """Pick each step from the candidate grid to minimize squared error on ``v``.

    All-zero channels get ``STEP_FLOOR`` and are flagged in ``q.degenerate``.
    """
    data = v.data if isinstance(v, Tensor) else np.asarray(v)
    if q.channel_axis is None:
        columns = data.reshape(-1, 1)
    else:
        columns = np.moveaxis(data, q.channel_axis, -1).reshape(-1, data.shape[q.channel_axis])
    qmin, qmax = q.qmin, q.qmax
    limit = qmax if qmax > 0 else -qmin
    steps = np.empty(columns.shape[1])
    degenerate = np.zeros(columns.shape[1], dtype=bool)
    for c in range(columns.shape[1]):
        col = columns[:, c]
        m = float(np.max(np.abs(col)))
        if m == 0.0:
            steps[c] = STEP_FLOOR
            degenerate[c] = True
            continue
        cand = grid_candidates(m, limit)
        steps[c] = cand[np.argmin(reconstruction_error(col, cand, qmin, qmax))]
    dtype = data.dtype if data.dtype.kind == "f" else np.float64
    shape = () if q.channel_axis is None else (columns.shape[1],)
    q.step = Tensor(steps.reshape(shape).astype(dtype), requires_grad=True)
    q.degenerate = degenerate
    n_per_step = columns.shape[0]
    q.grad_scale = 1.0 / float(np.sqrt(n_per_step * qmax)) if qmax > 0 else 1.0
    q.initialized = True


def product_bits(bits_a: int, bits_b: int, signed: bool = False) -> int:
    """Minimal width that holds every product of two integers of the given widths."""
    if bits_a < 1 or bits_b < 1:
        raise ValueError("bit widths must be >= 1")
    lo_a, hi_a = qrange(bits_a, signed)
    lo_b, hi_b = qrange(bits_b, signed)
    corners = [lo_a * lo_b, lo_a * hi_b, hi_a * lo_b, hi_a * hi_b]
    lo, hi = min(corners), max(corners)
    if not signed:
        return max(1, hi.bit_length())
    n = 1
    while not (-(2 ** (n - 1)) <= lo and hi <= 2 ** (n - 1) - 1):
        n += 1
    return n
