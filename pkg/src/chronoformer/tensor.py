"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable primitive records its parents and a closure that maps
the output gradient to parent gradients.  The graph reachable from a loss
is the computation record for that forward pass; :func:`backward` walks it
once in reverse topological order and then releases it.

Matrices follow the feature-by-position convention: a sequence of ``n``
vectors of size ``d`` is a ``d x n`` array.  Any number of leading batch
axes is allowed; matrix ops act on the last two axes.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take",
    "index",
    "sum",
    "mean",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "relu",
    "elu",
    "activation",
    "causal_conv1d",
    "maxpool1d_stride2",
    "backward",
    "finite_diff_check",
]


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        values = a.values + b.values
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(values, (a, b), "add", _bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        values = a.values - b.values
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(values, (a, b), "sub", _bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        values = a.values * b.values
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def _bw(g):
        _accumulate(a, _unbroadcast(g * b.values, a.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _result(values, (a, b), "mul", _bw)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain (non-differentiable) constant."""
    c = float(c)

    def _bw(g):
        _accumulate(a, g * c)

    return _result(a.values * c, (a,), "scale", _bw)


# -- shape manipulation -----------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        values = np.matmul(a.values, b.values)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.values, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.shape))

    return _result(values, (a, b), "matmul", _bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""

    def _bw(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(a.values, -1, -2), (a,), "transpose", _bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        values = a.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc

    def _bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(values, (a,), "reshape", _bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"cannot concatenate shapes {shapes} along axis {axis}") from exc
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _result(values, tensors, "concat", _bw)


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    values = a.values[key]

    def _bw(g):
        full = np.zeros_like(a.values)
        np.add.at(full, key, g)
        _accumulate(a, full)

    return _result(np.array(values, dtype=np.float64), (a,), "index", _bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (embedding-table lookup)."""
    indices = np.asarray(indices, dtype=np.intp)
    values = np.take(a.values, indices, axis=axis)

    def _bw(g):
        full = np.zeros_like(a.values)
        moved = np.moveaxis(full, axis, 0)
        g_moved = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, g_moved)
        _accumulate(a, full)

    return _result(values, (a,), "take", _bw)


# -- reductions -------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    values = np.sum(a.values, axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(values, dtype=np.float64), (a,), "sum", _bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.values.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = math.prod(a.shape[ax] for ax in axes)
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- nonlinearities ---------------------------------------------------------


def _check_finite(values: np.ndarray, op: str) -> None:
    if np.isnan(values).any():
        raise NumericError(f"{op}: NaN in input")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    _check_finite(a.values, "softmax_rows")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        _accumulate(a, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (a,), "softmax_rows", _bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    _check_finite(a.values, "log_softmax_rows")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def _bw(g):
        _accumulate(a, g - p * g.sum(axis=-1, keepdims=True))

    return _result(out, (a,), "log_softmax_rows", _bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each column (feature axis ``-2``), then apply gain and bias."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = a.shape[-2]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    x = a.values
    mu = x.mean(axis=-2, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gcol = gain.values[:, None]
    out = xhat * gcol + bias.values[:, None]

    def _bw(g):
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, (d, 1)).reshape(d))
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, (d, 1)).reshape(d))
        if a.requires_grad:
            gx = g * gcol
            m1 = gx.mean(axis=-2, keepdims=True)
            m2 = (gx * xhat).mean(axis=-2, keepdims=True)
            _accumulate(a, inv * (gx - m1 - xhat * m2))

    return _result(out, (a, gain, bias), "layer_norm", _bw)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0

    def _bw(g):
        _accumulate(a, g * mask)

    return _result(np.where(mask, a.values, 0.0), (a,), "relu", _bw)


def elu(a: Tensor) -> Tensor:
    x = a.values
    pos = x > 0
    em1 = np.expm1(np.minimum(x, 0.0))
    out = np.where(pos, x, em1)

    def _bw(g):
        _accumulate(a, g * np.where(pos, 1.0, em1 + 1.0))

    return _result(out, (a,), "elu", _bw)


_ACTIVATIONS = {"relu": relu, "elu": elu}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(a)


# -- temporal ops -----------------------------------------------------------


def causal_conv1d(a: Tensor, kernels: Tensor) -> Tensor:
    """Causal 1-D convolution over the last (time) axis.

    ``a`` is ``(..., d_in, L)`` and ``kernels`` is ``(..., d_out, d_in, k)``;
    tap ``k - 1`` multiplies the current position, tap ``0`` the position
    ``k - 1`` steps back.  The input is left-padded with ``k - 1`` zeros.
    """
    k = kernels.shape[-1]
    if k <= 0:
        raise ConfigError(f"kernel size must be >= 1, got {k}")
    if kernels.shape[-2] != a.shape[-2]:
        raise DimensionError(
            f"causal_conv1d: kernels {kernels.shape} expect {kernels.shape[-2]} input channels, "
            f"input has shape {a.shape}"
        )
    L = a.shape[-1]
    x = a.values
    pad = np.zeros(x.shape[:-1] + (k - 1,))
    xp = np.concatenate([pad, x], axis=-1) if k > 1 else x
    taps = [np.ascontiguousarray(kernels.values[..., j]) for j in range(k)]
    out = np.matmul(taps[k - 1], xp[..., k - 1 : k - 1 + L])
    for j in range(k - 1):
        out = out + np.matmul(taps[j], xp[..., j : j + L])

    def _bw(g):
        if kernels.requires_grad:
            gk = np.empty(kernels.shape)
            for j in range(k):
                contrib = np.matmul(g, np.swapaxes(xp[..., j : j + L], -1, -2))
                gk[..., j] = _unbroadcast(contrib, kernels.shape[:-1])
            _accumulate(kernels, gk)
        if a.requires_grad:
            gxp = np.zeros(np.broadcast_shapes(xp.shape[:-2], g.shape[:-2]) + xp.shape[-2:])
            for j in range(k):
                gxp[..., j : j + L] += np.matmul(np.swapaxes(taps[j], -1, -2), g)
            _accumulate(a, _unbroadcast(gxp[..., k - 1 :], a.shape))

    return _result(out, (a, kernels), "causal_conv1d", _bw)


def maxpool1d_stride2(a: Tensor) -> Tensor:
    """Max-pool the time axis with window 3, stride 2 and padding 1.

    Output length is ``ceil(L / 2)``; padded slots never win.
    """
    L = a.shape[-1]
    if L < 1:
        raise ContractError("maxpool1d_stride2 needs at least one time step")
    n_out = (L + 1) // 2
    x = a.values
    fill = np.full(x.shape[:-1] + (1,), -np.inf)
    xp = np.concatenate([fill, x, fill], axis=-1)
    windows = np.stack([xp[..., j : j + 2 * n_out : 2] for j in range(3)], axis=-1)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        src = 2 * np.arange(n_out) + arg - 1
        full = np.zeros_like(x)
        lead = np.indices(src.shape)
        np.add.at(full, tuple(lead[:-1]) + (src,), g)
        _accumulate(a, full)

    return _result(out, (a,), "maxpool1d_stride2", _bw)


# -- gradient machinery -------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; the graph above the leaves is
    released afterwards.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        _accumulate(loss, np.ones_like(loss.values))
        return
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node.grad = None
            node._parents = ()
            node._backward = None


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.  The
    relative error of one coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError(f"step must be positive, got {step}")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    again = f()
    if loss.values.tobytes() != again.values.tobytes():
        raise ContractError("finite_diff_check: f is not deterministic (fix its seed)")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.values.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst
