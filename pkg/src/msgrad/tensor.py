"""Dense float64 tensors with a tape-based reverse-mode differentiator.

Operations record onto the innermost active :class:`Tape` of the calling
thread. Outside a tape they compute forward values only, which is what
evaluation code wants.

    >>> theta = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tensor_sum(theta)
    >>> backward(loss, tape, {"theta": theta})["theta"].data
    array([1., 1., 1.])
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from collections.abc import Callable, Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "Params",
    "Tape",
    "Node",
    "as_tensor",
    "conv2d",
    "conv1d",
    "avgpool2",
    "upsample_nearest2",
    "relu",
    "add",
    "sub",
    "mul",
    "scale",
    "concat_channels",
    "tensor_sum",
    "mse_loss",
    "backward",
    "finite_diff_grad",
    "params_copy",
    "params_flat",
    "params_size",
]


class ShapeError(ValueError):
    """An operand has the wrong shape for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward value or gradient."""


class Tensor:
    """A float64 array, optionally marked as a differentiation leaf.

    ``grad`` is a slot for callers that want to park a gradient next to its
    value; :func:`backward` never writes it.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"


Params = "OrderedDict[str, Tensor]"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    op: str


@dataclass
class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations run, so the list is topologically
    ordered by construction. Each thread has its own stack of active tapes.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    _check_finite(out_data, op)
    tape = _active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs and tape is not None
    out.grad = None
    out.name = None
    if out.requires_grad:
        tape.nodes.append(Node(inputs, out, backward_fn, op))
    return out


def _require_ndim(x: Tensor, ndim: int, what: str) -> None:
    if x.data.ndim != ndim:
        raise ShapeError(f"{what} must be {ndim}-D, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def _conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # columns laid out (c, ki, kj, n, h, w) so the copy runs along image rows
    win = sliding_window_view(xp, (h, wd), axis=(2, 3))  # (n, c, k, k, h, w)
    cols = np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5)).reshape(c * k * k, n * h * wd)
    out = w.reshape(o, c * k * k) @ cols
    out += b[:, None]
    return np.ascontiguousarray(out.reshape(o, n, h, wd).transpose(1, 0, 2, 3)), cols


def _conv2d_backward(gout: np.ndarray, x_shape, w: np.ndarray, cols: np.ndarray, pad: int,
                     need_x: bool = True):
    n, c, h, wd = x_shape
    o = w.shape[0]
    g = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(o, n * h * wd)
    gw = (g @ cols.T).reshape(w.shape)
    gb = g.sum(axis=1)
    if not need_x:
        return None, gw, gb
    # input gradient is a correlation of gout with the flipped, transposed kernel
    w_adj = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx, _ = _conv2d_forward(gout, w_adj, np.zeros(c), pad)
    return gx, gw, gb


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero padding ``(k - 1) // 2``.

    ``x`` is ``(N, C_in, H, W)``, ``kernel`` is ``(C_out, C_in, k, k)`` and
    the output keeps the input's spatial size.
    """
    _require_ndim(x, 4, "conv2d input")
    _require_ndim(kernel, 4, "conv2d kernel")
    _require_ndim(bias, 1, "conv2d bias")
    o, ci, k, k2 = kernel.shape
    n, c, h, w = x.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {k}x{k2}")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise ShapeError(f"conv2d padding must be {(k - 1) // 2} for k={k}, got {padding}")
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input has C_in={c}, kernel expects {ci}")
    if bias.shape[0] != o:
        raise ShapeError(f"conv2d bias has {bias.shape[0]} entries, kernel has C_out={o}")
    if h <= padding or w <= padding:
        raise ShapeError(f"conv2d spatial size {h}x{w} too small for k={k}")
    out, cols = _conv2d_forward(x.data, kernel.data, bias.data, padding)
    x_shape = x.shape
    wdata = kernel.data
    need_x = x.requires_grad

    def back(gout):
        # looked up at call time so tests can swap in a faulty backward
        return _CONV2D_BACKWARD[0](gout, x_shape, wdata, cols, padding, need_x)

    return _record("conv2d", (x, kernel, bias), out, back)


_CONV2D_BACKWARD = [_conv2d_backward]


@contextmanager
def conv2d_backward_override(fn):
    """Temporarily replace the conv2d backward (negative-control tests)."""
    old = _CONV2D_BACKWARD[0]
    _CONV2D_BACKWARD[0] = fn
    try:
        yield
    finally:
        _CONV2D_BACKWARD[0] = old


def conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Single-channel 1-D cross-correlation, zero padded, output length n."""
    _require_ndim(x, 1, "conv1d input")
    _require_ndim(kernel, 1, "conv1d kernel")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel length must be odd, got {k}")
    pad = (k - 1) // 2
    n = x.shape[0]
    xp = np.pad(x.data, pad)
    win = sliding_window_view(xp, k)  # (n, k)
    out = win @ kernel.data

    def back(gout):
        gk = gout @ win
        gxp = np.zeros(n + 2 * pad)
        for j in range(k):
            gxp[j : j + n] += gout * kernel.data[j]
        return gxp[pad : pad + n], gk

    return _record("conv1d", (x, kernel), out, back)


# ---------------------------------------------------------------------------
# resampling


def avgpool2(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 blocks of an ``(N, C, H, W)`` tensor."""
    _require_ndim(x, 4, "avgpool2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even H and W, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    # fixed summation order keeps results reproducible
    out = (blocks[:, :, :, 0, :, 0] + blocks[:, :, :, 0, :, 1]
           + blocks[:, :, :, 1, :, 0] + blocks[:, :, :, 1, :, 1]) * 0.25

    def back(gout):
        g = np.repeat(np.repeat(gout * 0.25, 2, axis=2), 2, axis=3)
        return (g,)

    return _record("avgpool2", (x,), out, back)


def upsample_nearest2(x: Tensor) -> Tensor:
    _require_ndim(x, 4, "upsample_nearest2 input")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.shape

    def back(gout):
        b = gout.reshape(n, c, h, 2, w, 2)
        return (b[:, :, :, 0, :, 0] + b[:, :, :, 0, :, 1] + b[:, :, :, 1, :, 0] + b[:, :, :, 1, :, 1],)

    return _record("upsample_nearest2", (x,), out, back)


# ---------------------------------------------------------------------------
# pointwise and reductions


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return _record("relu", (x,), out, lambda gout: (gout * mask,))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two ``(N, C, H, W)`` tensors along the channel axis."""
    _require_ndim(a, 4, "concat input")
    _require_ndim(b, 4, "concat input")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _record("concat", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    _same_shape(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.dot(diff.reshape(-1), diff.reshape(-1)) / n)

    def back(g):
        gp = diff * (2.0 * float(g) / n)
        return gp, -gp

    return _record("mse_loss", (pred, target), out, back)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: Tape, params: Mapping[str, Tensor]) -> OrderedDict:
    """Gradients of a scalar ``loss`` with respect to every entry of ``params``.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        gins = node.backward_fn(gout)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    out = OrderedDict()
    for name, p in params.items():
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        _check_finite(g, f"backward (gradient of {name!r})")
        out[name] = Tensor(g)
    return out


def finite_diff_grad(loss_fn: Callable[[Mapping[str, Tensor]], Tensor | float],
                     params: Mapping[str, Tensor], step: float = 1e-5,
                     coords: Mapping[str, list] | None = None) -> OrderedDict:
    """Central-difference gradient of ``loss_fn`` at ``params``.

    ``coords`` optionally restricts the probe to a list of flat indices per
    parameter; unprobed entries are left at zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")

    def value(p):
        v = loss_fn(p)
        return v.item() if isinstance(v, Tensor) else float(v)

    out = OrderedDict()
    for name, p in params.items():
        base = p.data.reshape(-1)
        g = np.zeros(base.size)
        idx = range(base.size) if coords is None else coords.get(name, [])
        for i in idx:
            probe = OrderedDict(params)
            f = []
            for sign in (1.0, -1.0):
                moved = base.copy()
                moved[i] += sign * step
                probe[name] = Tensor(moved.reshape(p.shape))
                f.append(value(probe))
            g[i] = (f[0] - f[1]) / (2.0 * step)
        out[name] = Tensor(g.reshape(p.shape))
    return out


def params_copy(params: Mapping[str, Tensor], requires_grad: bool = True) -> OrderedDict:
    return OrderedDict((k, Tensor(v.data.copy(), requires_grad=requires_grad)) for k, v in params.items())


def params_flat(params: Mapping[str, Tensor]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([t.data.reshape(-1) for t in params.values()])


def params_size(params: Mapping[str, Tensor]) -> int:
    return sum(t.size for t in params.values())
