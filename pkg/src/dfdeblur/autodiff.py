"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays, by convention laid out NCHW for
image data. Differentiable operations record a backward closure and
their operand tensors; `backward` walks that graph once in reverse
topological order and accumulates gradients into `requires_grad` leaves.

Conventions kept throughout:

- float32 for training, float64 for numerical verification
- no implicit broadcasting: elementwise operations require identical shapes
- subgradient 0 at the relu and absolute-value kinks
- gradient buffers are never mutated in place once handed out
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "BatchNormStats",
    "ShapeMismatchError",
    "OffTapeError",
    "DomainError",
    "DegenerateBatchError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "shift",
    "relu",
    "absolute",
    "square",
    "sqrt_shifted",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "concat_channels",
    "spatial_diff",
    "conv2d",
    "conv_transpose2d",
    "batch_norm2d",
    "backward",
    "zero_grads",
]


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class OffTapeError(RuntimeError):
    """Backward was requested on a tensor with no recorded operation."""


class DomainError(ValueError):
    """An operation was evaluated outside its numeric domain."""


class DegenerateBatchError(ValueError):
    """Train-mode batch norm saw fewer than two values per channel."""


_GRAD_ENABLED = True

# Test hook used by the gradient-check command to prove the checker can
# detect a wrong derivative. Holds the name of the op whose backward rule
# is deliberately perturbed, or None for correct behavior.
_BACKWARD_BUG: str | None = None


def set_backward_bug(name: str | None) -> None:
    global _BACKWARD_BUG
    _BACKWARD_BUG = name


class no_grad:
    """Context manager that disables operation recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense float array with an optional gradient slot and tape linkage.

    `requires_grad` marks trainable leaves; tensors produced by recorded
    operations propagate it automatically. After `backward`, `grad` is
    populated only on leaves (tensors with no recorded parents).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        """A view of the same data with no graph linkage."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    def __radd__(self, other):
        return shift(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(
            f"{op}: operand shapes differ, {a.data.shape} vs {b.data.shape}"
        )
    if a.data.dtype != b.data.dtype:
        raise TypeError(
            f"{op}: operand dtypes differ, {a.data.dtype} vs {b.data.dtype}"
        )


# ---------------------------------------------------------------------------
# elementwise and reduction operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward_fn(g):
        return (g, g)

    return _record(a.data + b.data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def backward_fn(g):
        return (g, -g)

    return _record(a.data - b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return (g * b_data, g * a_data)

    return _record(a_data * b_data, (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        ga = g / b_data
        gb = -g * a_data / (b_data * b_data)
        return (ga, gb)

    return _record(a_data / b_data, (a, b), backward_fn)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward_fn(g):
        return (g * s,)

    return _record(x.data * np.asarray(s, dtype=x.data.dtype), (x,), backward_fn)


def shift(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        return (g,)

    return _record(x.data + np.asarray(c, dtype=x.data.dtype), (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(g):
        gx = g * mask
        if _BACKWARD_BUG == "relu":
            gx = gx * 1.02
        return (gx,)

    return _record(np.where(mask, x.data, 0), (x,), backward_fn)


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def backward_fn(g):
        return (g * sign,)

    return _record(np.abs(x.data), (x,), backward_fn)


def square(x: Tensor) -> Tensor:
    x_data = x.data

    def backward_fn(g):
        return (2.0 * g * x_data,)

    return _record(x_data * x_data, (x,), backward_fn)


def sqrt_shifted(x: Tensor, c: float) -> Tensor:
    """sqrt(x + c), with the shift applied before the domain check."""
    c = float(c)
    shifted = x.data + np.asarray(c, dtype=x.data.dtype)
    if np.any(shifted < 0):
        raise DomainError(
            f"sqrt_shifted: x + {c} reaches {shifted.min()}, below zero"
        )
    out = np.sqrt(shifted)

    def backward_fn(g):
        return (g * 0.5 / out,)

    return _record(out, (x,), backward_fn)


def reduce_sum(x: Tensor) -> Tensor:
    def backward_fn(g):
        return (g * np.ones_like(x.data),)

    return _record(x.data.sum(), (x,), backward_fn)


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeMismatchError("reduce_mean: empty tensor")

    def backward_fn(g):
        return ((g / n) * np.ones_like(x.data),)

    return _record(x.data.mean(), (x,), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatchError(
            f"reshape: cannot view {x.data.shape} as {shape}"
        ) from exc
    in_shape = x.data.shape

    def backward_fn(g):
        return (g.reshape(in_shape),)

    return _record(out, (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeMismatchError(
            f"concat_channels: expected rank-4 NCHW operands, got "
            f"{a.data.shape} and {b.data.shape}"
        )
    sa, sb = a.data.shape, b.data.shape
    if (sa[0], sa[2], sa[3]) != (sb[0], sb[2], sb[3]):
        raise ShapeMismatchError(
            f"concat_channels: batch or spatial extents differ, {sa} vs {sb}"
        )
    if a.data.dtype != b.data.dtype:
        raise TypeError(
            f"concat_channels: operand dtypes differ, {a.data.dtype} vs {b.data.dtype}"
        )
    ca = sa[1]

    def backward_fn(g):
        return (g[:, :ca], g[:, ca:])

    return _record(np.concatenate([a.data, b.data], axis=1), (a, b), backward_fn)


def spatial_diff(x: Tensor) -> tuple[Tensor, Tensor]:
    """Forward differences along width and height of an NCHW tensor.

    Returns (dx, dy) with shapes [N,C,H,W-1] and [N,C,H-1,W].
    """
    if x.data.ndim != 4:
        raise ShapeMismatchError(
            f"spatial_diff: expected rank-4 NCHW input, got {x.data.shape}"
        )
    n, c, h, w = x.data.shape
    if h < 2 or w < 2:
        raise ShapeMismatchError(
            f"spatial_diff: spatial extents must be at least 2, got {h}x{w}"
        )

    def backward_dx(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :, 1:] += g
        gx[:, :, :, :-1] -= g
        return (gx,)

    def backward_dy(g):
        gx = np.zeros_like(x.data)
        gx[:, :, 1:, :] += g
        gx[:, :, :-1, :] -= g
        return (gx,)

    dx = _record(x.data[:, :, :, 1:] - x.data[:, :, :, :-1], (x,), backward_dx)
    dy = _record(x.data[:, :, 1:, :] - x.data[:, :, :-1, :], (x,), backward_dy)
    return dx, dy


# ---------------------------------------------------------------------------
# convolution via im2col / col2im
#
# conv2d flattens sliding windows into a column matrix and multiplies by the
# flattened weight. conv_transpose2d multiplies by the same weight transposed
# and scatters columns back, so it is the exact linear adjoint of conv2d with
# matching stride and padding.


def _pad_nchw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    n, c, hp, wp = xp.shape
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, h_out * w_out)
    return cols, h_out, w_out


def _col2im(
    cols: np.ndarray,
    n: int,
    c: int,
    h: int,
    w: int,
    k: int,
    stride: int,
    padding: int,
    h_win: int,
    w_win: int,
) -> np.ndarray:
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(n, c, k, k, h_win, w_win)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * h_win : stride, j : j + stride * w_win : stride] += c6[
                :, :, i, j
            ]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _check_conv_operands(x: Tensor, w: Tensor, b, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"{op}: expected rank-4 NCHW input, got {x.data.shape}")
    if w.data.ndim != 4:
        raise ShapeMismatchError(f"{op}: expected rank-4 weight, got {w.data.shape}")
    if w.data.shape[2] != w.data.shape[3]:
        raise ShapeMismatchError(f"{op}: kernel must be square, got {w.data.shape}")
    if x.data.dtype != w.data.dtype:
        raise TypeError(f"{op}: input/weight dtypes differ, {x.data.dtype} vs {w.data.dtype}")
    if b is not None:
        if b.data.ndim != 1:
            raise ShapeMismatchError(f"{op}: expected rank-1 bias, got {b.data.shape}")
        if b.data.dtype != x.data.dtype:
            raise TypeError(f"{op}: bias dtype differs, {b.data.dtype} vs {x.data.dtype}")


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of x [N,Cin,H,W] with w [Cout,Cin,k,k] plus bias."""
    _check_conv_operands(x, w, b, "conv2d")
    n, c_in, h, w_sp = x.data.shape
    c_out, wc_in, k, _ = w.data.shape
    if wc_in != c_in:
        raise ShapeMismatchError(
            f"conv2d: input has {c_in} channels but weight {w.data.shape} expects {wc_in}"
        )
    if b is not None and b.data.shape[0] != c_out:
        raise ShapeMismatchError(
            f"conv2d: bias shape {b.data.shape} does not match {c_out} output channels"
        )
    if k > h + 2 * padding or k > w_sp + 2 * padding:
        raise ShapeMismatchError(
            f"conv2d: kernel {k}x{k} exceeds padded input {h + 2 * padding}x{w_sp + 2 * padding}"
        )

    cols, h_out, w_out = _im2col(_pad_nchw(x.data, padding), k, stride)
    cols = np.ascontiguousarray(cols)
    w_mat = w.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w_mat, cols)
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(n, c_out, h_out, w_out)

    def backward_fn(g):
        g_flat = g.reshape(n, c_out, h_out * w_out)
        gw = np.matmul(g_flat, cols.transpose(0, 2, 1)).sum(axis=0)
        if _BACKWARD_BUG == "conv2d":
            gw = gw * 1.02
        gw = gw.reshape(w.data.shape)
        gcols = np.matmul(w_mat.T, g_flat)
        gx = _col2im(gcols, n, c_in, h, w_sp, k, stride, padding, h_out, w_out)
        gb = None if b is None else g_flat.sum(axis=(0, 2))
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    if b is None:
        def backward_no_bias(g):
            return backward_fn(g)[:2]
        return _record(out, parents, backward_no_bias)
    return _record(out, parents, backward_fn)


def conv_transpose2d(
    y: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Adjoint of conv2d: y [N,Cin,H,W] with w [Cin,Cout,k,k] plus bias.

    Output extent is (H-1)*stride - 2*padding + k per spatial axis.
    """
    _check_conv_operands(y, w, b, "conv_transpose2d")
    n, c_in, h, w_sp = y.data.shape
    wc_in, c_out, k, _ = w.data.shape
    if wc_in != c_in:
        raise ShapeMismatchError(
            f"conv_transpose2d: input has {c_in} channels but weight {w.data.shape} "
            f"expects {wc_in}"
        )
    if b is not None and b.data.shape[0] != c_out:
        raise ShapeMismatchError(
            f"conv_transpose2d: bias shape {b.data.shape} does not match {c_out} "
            f"output channels"
        )
    h_out = (h - 1) * stride - 2 * padding + k
    w_out = (w_sp - 1) * stride - 2 * padding + k
    if h_out <= 0 or w_out <= 0:
        raise ShapeMismatchError(
            f"conv_transpose2d: output extent {h_out}x{w_out} is not positive"
        )

    w_mat = w.data.reshape(c_in, c_out * k * k)
    y_flat = np.ascontiguousarray(y.data.reshape(n, c_in, h * w_sp))
    cols = np.matmul(w_mat.T, y_flat)
    out = _col2im(cols, n, c_out, h_out, w_out, k, stride, padding, h, w_sp)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward_fn(g):
        gcols, h_win, w_win = _im2col(_pad_nchw(g, padding), k, stride)
        gcols = np.ascontiguousarray(gcols)
        gy = np.matmul(w_mat, gcols).reshape(n, c_in, h, w_sp)
        gw = np.matmul(y_flat, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        gb = None if b is None else g.sum(axis=(0, 2, 3))
        if b is None:
            return (gy, gw)
        return (gy, gw, gb)

    parents = (y, w) if b is None else (y, w, b)
    return _record(out, parents, backward_fn)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormStats:
    """Running mean and variance, updated in place with a fixed momentum."""

    __slots__ = ("mean", "var", "momentum")

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = float(momentum)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    training: bool,
    stats: BatchNormStats,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    Train mode normalizes by biased batch statistics over (N, H, W) and
    updates `stats` in place; eval mode normalizes by the running stats.
    """
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"batch_norm2d: expected rank-4 input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatchError(
            f"batch_norm2d: gamma {gamma.data.shape} and beta {beta.data.shape} "
            f"must both be ({c},)"
        )
    m = n * h * w
    if training:
        if m < 2:
            raise DegenerateBatchError(
                f"batch_norm2d: {m} value(s) per channel cannot estimate a variance"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = np.asarray(stats.momentum, dtype=stats.mean.dtype)
        stats.mean *= 1 - mom
        stats.mean += mom * mean.astype(stats.mean.dtype)
        stats.var *= 1 - mom
        stats.var += mom * var.astype(stats.var.dtype)
    else:
        mean = stats.mean.astype(x.data.dtype)
        var = stats.var.astype(x.data.dtype)

    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gy = g * gamma.data[None, :, None, None]
        if training:
            mean_gy = gy.mean(axis=(0, 2, 3))[None, :, None, None]
            mean_gy_xhat = (gy * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
            gx = inv[None, :, None, None] * (gy - mean_gy - xhat * mean_gy_xhat)
        else:
            gx = gy * inv[None, :, None, None]
        return (gx, ggamma, gbeta)

    return _record(out, (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    The loss must be scalar and produced by a recorded operation. Repeated
    calls keep adding into `grad`; reset with `zero_grads`.
    """
    if not isinstance(loss, Tensor):
        raise TypeError(f"backward expects a Tensor, got {type(loss).__name__}")
    if loss.data.size != 1:
        raise ShapeMismatchError(
            f"backward expects a scalar loss, got shape {loss.data.shape}"
        )
    if loss._backward_fn is None:
        raise OffTapeError(
            "backward called on a tensor with no recorded operation; "
            "it is either a leaf or was computed under no_grad"
        )

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is not None:
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g


def zero_grads(tensors) -> None:
    """Clear the gradient slot of every tensor in the iterable."""
    for t in tensors:
        t.grad = None
