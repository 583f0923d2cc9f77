"""Dense NHWC tensors with tape-based reverse-mode differentiation.

Activations are laid out ``[B, H, D, C]`` and convolution weights
``[Kh, Kw, IN, OUT]``.  Every op records a closure on the output tensor;
:meth:`Tensor.backward` walks the graph in reverse topological order.
Convolutions are stride-1 cross-correlations.
"""

from __future__ import annotations

import contextlib
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ConvSpec",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "no_grad",
    "count_ops",
    "OpCounter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "sqrt",
    "matmul",
    "reshape",
    "transpose",
    "sum_all",
    "mean_all",
    "sum_spatial",
    "mean_bhd",
    "var_bhd",
    "flatten_bhd",
    "relu",
    "pad_spatial",
    "pad",
    "pad_channels",
    "avg_pool2",
    "global_avg_pool",
    "conv2d",
    "conv_as_matmul_sum",
    "cross_entropy",
    "stack_sum",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# instrumentation

class OpCounter:
    """Accumulates multiply counts per label while active."""

    def __init__(self) -> None:
        self.counts: dict[str, int] = defaultdict(int)

    def add(self, label: str, n: int) -> None:
        self.counts[label] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __repr__(self) -> str:
        return f"OpCounter(total={self.total}, {dict(self.counts)})"


_COUNTERS: list[OpCounter] = []
_GRAD_ENABLED = [True]


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _count(label: str, n: int) -> None:
    for c in _COUNTERS:
        c.add(label, n)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


# --------------------------------------------------------------------------
# core type

class Tensor:
    """An ndarray plus an optional gradient buffer and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _op: str = "leaf", check: bool = True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in {_op} output")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op
        self.name = name

    # -- basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # -- autodiff
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every tensor that requires it.

        The loss must be a scalar unless an explicit seed gradient is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), check=False)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]]) -> Tensor:
    needs = _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# --------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))])


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))])


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    _count("mul", out.size)
    return _make(out, (a, b), "mul",
                 lambda g: [(a, _unbroadcast(g * b.data, a.shape)),
                            (b, _unbroadcast(g * a.data, b.shape))])


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    _count("div", out.size)

    def backward(g):
        return [(a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * out / b.data, b.shape))]

    return _make(out, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: [(a, -g)])


def square(a: Tensor) -> Tensor:
    _count("square", a.size)
    return _make(a.data * a.data, (a,), "square", lambda g: [(a, 2.0 * a.data * g)])


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), "sqrt", lambda g: [(a, g / (2.0 * out))])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: [(a, g * mask)])


# --------------------------------------------------------------------------
# shape ops and reductions

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: [(a, g.reshape(src))])


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), "transpose",
                 lambda g: [(a, np.transpose(g, inv))])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _count("matmul", a.shape[0] * a.shape[1] * b.shape[1])
    return _make(a.data @ b.data, (a, b), "matmul",
                 lambda g: [(a, g @ b.data.T), (b, a.data.T @ g)])


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), "sum",
                 lambda g: [(a, np.broadcast_to(g, a.shape).copy())])


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _make(np.asarray(a.data.mean()), (a,), "mean",
                 lambda g: [(a, np.broadcast_to(g / n, a.shape).copy())])


def sum_spatial(w: Tensor) -> Tensor:
    """Sum a ``[Kh, Kw, IN, OUT]`` kernel over its two spatial axes."""
    if w.ndim != 4:
        raise ShapeError(f"sum_spatial expects a rank-4 kernel, got {w.shape}")
    shape = w.shape
    return _make(w.data.sum(axis=(0, 1)), (w,), "sum_spatial",
                 lambda g: [(w, np.broadcast_to(g, shape).copy())])


def _require_rank4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a rank-4 [B, H, D, C] tensor, got {x.shape}")


def mean_bhd(x: Tensor) -> Tensor:
    """Per-channel mean over batch, height and width (any leading axes)."""
    if x.ndim < 2:
        raise ShapeError(f"mean_bhd expects rank >= 2, got {x.shape}")
    axes = tuple(range(x.ndim - 1))
    n = int(np.prod(x.shape[:-1]))
    shape = x.shape
    return _make(x.data.mean(axis=axes), (x,), "mean_bhd",
                 lambda g: [(x, np.broadcast_to(g / n, shape).copy())])


def var_bhd(x: Tensor) -> Tensor:
    """Per-channel population variance (1/N) over all leading axes."""
    if x.ndim < 2:
        raise ShapeError(f"var_bhd expects rank >= 2, got {x.shape}")
    axes = tuple(range(x.ndim - 1))
    n = int(np.prod(x.shape[:-1]))
    centered = x.data - x.data.mean(axis=axes)
    _count("var_bhd", x.size)
    out = (centered * centered).mean(axis=axes)
    return _make(out, (x,), "var_bhd", lambda g: [(x, (2.0 / n) * centered * g)])


def flatten_bhd(x: Tensor) -> Tensor:
    """Collapse ``[B, H, D, C]`` to ``[B*H*D, C]`` in row-major order."""
    _require_rank4(x, "flatten_bhd")
    return reshape(x, (-1, x.shape[-1]))


def stack_sum(items: Sequence[Tensor]) -> Tensor:
    out = items[0]
    for t in items[1:]:
        out = add(out, t)
    return out


def pad_spatial(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    _require_rank4(x, "pad_spatial")
    if top == bottom == left == right == 0:
        return x
    H, D = x.shape[1], x.shape[2]
    out = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    return _make(out, (x,), "pad_spatial",
                 lambda g: [(x, g[:, top:top + H, left:left + D, :])])


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad with numpy-style ``(before, after)`` widths per axis."""
    if len(widths) != x.ndim:
        raise ShapeError(f"pad: {len(widths)} widths for rank-{x.ndim} tensor")
    if all(a == 0 and b == 0 for a, b in widths):
        return x
    index = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))
    return _make(np.pad(x.data, widths), (x,), "pad", lambda g: [(x, g[index])])


def pad_channels(x: Tensor, channels: int) -> Tensor:
    """Zero-extend the channel axis to ``channels`` (identity shortcut across widths)."""
    c = x.shape[-1]
    if channels == c:
        return x
    if channels < c:
        raise ShapeError(f"pad_channels: cannot shrink {c} to {channels}")
    widths = [(0, 0)] * (x.ndim - 1) + [(0, channels - c)]
    return _make(np.pad(x.data, widths), (x,), "pad_channels", lambda g: [(x, g[..., :c])])


def avg_pool2(x: Tensor) -> Tensor:
    _require_rank4(x, "avg_pool2")
    B, H, D, C = x.shape
    if H % 2 or D % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    out = x.data.reshape(B, H // 2, 2, D // 2, 2, C).mean(axis=(2, 4))

    def backward(g):
        up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return [(x, up)]

    return _make(out, (x,), "avg_pool2", backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank4(x, "global_avg_pool")
    B, H, D, C = x.shape
    n = H * D
    return _make(x.data.mean(axis=(1, 2)), (x,), "gap",
                 lambda g: [(x, np.broadcast_to(g[:, None, None, :] / n, x.shape).copy())])


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``[N, K]`` logits against integer labels."""
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {len(labels)} labels")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = len(labels)
    idx = np.arange(n)
    loss = -logp[idx, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[idx, labels] -= 1.0
        return [(logits, g * p / n)]

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", backward)


# --------------------------------------------------------------------------
# convolution

@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    padding: str = "valid"
    stride: int = 1

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.in_channels, self.out_channels) < 1:
            raise ValueError(f"ConvSpec dimensions must be >= 1: {self}")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.stride != 1:
            raise ValueError("only stride 1 is supported")

    @classmethod
    def for_kernel(cls, w: Tensor | np.ndarray, padding: str = "valid") -> "ConvSpec":
        kh, kw, cin, cout = w.shape
        return cls(kh, kw, cin, cout, padding)


def _same_pads(k: int) -> tuple[int, int]:
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """``[B, H, D, C]`` -> ``[B*H'*D', kh*kw*C]`` with column order (i, j, c)."""
    B, H, D, C = x.shape
    Ho, Do = H - kh + 1, D - kw + 1
    if kh == 1 and kw == 1:
        return x.reshape(-1, C)
    cols = np.empty((B, Ho, Do, kh, kw, C), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = x[:, i:i + Ho, j:j + Do, :]
    return cols.reshape(B * Ho * Do, kh * kw * C)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int) -> np.ndarray:
    B, H, D, C = shape
    Ho, Do = H - kh + 1, D - kw + 1
    if kh == 1 and kw == 1:
        return cols.reshape(shape)
    cols = cols.reshape(B, Ho, Do, kh, kw, C)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + Ho, j:j + Do, :] += cols[:, :, :, i, j, :]
    return out


def _check_conv_args(x: Tensor, w: Tensor, padding: str) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x [B,H,D,IN] and w [Kh,Kw,IN,OUT], got {x.shape}, {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[3]}, kernel expects {w.shape[2]}")
    if padding == "valid" and (w.shape[0] > x.shape[1] or w.shape[1] > x.shape[2]):
        raise ShapeError(f"valid conv2d: kernel {w.shape[:2]} larger than map {x.shape[1:3]}")
    for t in (x, w):
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError("conv2d received non-finite input")


def conv2d(x: Tensor, w: Tensor, spec: ConvSpec | str = "valid") -> Tensor:
    """Stride-1 cross-correlation of NHWC ``x`` with ``[Kh, Kw, IN, OUT]`` ``w``."""
    padding = spec if isinstance(spec, str) else spec.padding
    if not isinstance(spec, str):
        if (spec.kernel_h, spec.kernel_w, spec.in_channels, spec.out_channels) != w.shape:
            raise ShapeError(f"ConvSpec {spec} does not describe kernel of shape {w.shape}")
    _check_conv_args(x, w, padding)
    kh, kw, cin, cout = w.shape
    if padding == "same":
        (t, b), (l, r) = _same_pads(kh), _same_pads(kw)
        x = pad_spatial(x, t, b, l, r)
    xd, wd = x.data, w.data
    B, H, D, _ = xd.shape
    Ho, Do = H - kh + 1, D - kw + 1
    cols = _im2col(xd, kh, kw)
    wmat = wd.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(B, Ho, Do, cout)
    _count("conv2d", B * Ho * Do * kh * kw * cin * cout)

    def backward(g):
        grads = []
        gmat = g.reshape(-1, cout)
        if w.requires_grad:
            _count("conv2d_bwd", B * Ho * Do * kh * kw * cin * cout)
            grads.append((w, (cols.T @ gmat).reshape(wd.shape)))
        if x.requires_grad:
            _count("conv2d_bwd", B * Ho * Do * kh * kw * cin * cout)
            grads.append((x, _col2im(gmat @ wmat.T, xd.shape, kh, kw)))
        return grads

    return _make(out, (x, w), "conv2d", backward)


def conv_as_matmul_sum(x: Tensor | np.ndarray, w: Tensor | np.ndarray, padding: str = "valid") -> np.ndarray:
    """Valid convolution written as a sum of sliced, flattened matrix products.

    ``(X * W)^F = sum_{i,j} X[:, i:H-Kh+1+i, j:D-Kw+1+j, :]^F @ W[i, j]``.
    Used as an independent oracle for :func:`conv2d`; carries no gradient.
    """
    if padding != "valid":
        raise NotImplementedError("conv_as_matmul_sum only supports valid padding")
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    wd = w.data if isinstance(w, Tensor) else np.asarray(w)
    B, H, D, cin = xd.shape
    kh, kw, cin_w, cout = wd.shape
    if cin != cin_w:
        raise ShapeError(f"channel mismatch: {cin} vs {cin_w}")
    if kh > H or kw > D:
        raise ShapeError(f"kernel {kh}x{kw} exceeds map {H}x{D}")
    Ho, Do = H - kh + 1, D - kw + 1
    acc = np.zeros((B * Ho * Do, cout), dtype=np.result_type(xd, wd))
    for i in range(kh):
        for j in range(kw):
            acc += xd[:, i:Ho + i, j:Do + j, :].reshape(-1, cin) @ wd[i, j]
    return acc.reshape(B, Ho, Do, cout)
