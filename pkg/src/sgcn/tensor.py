"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least
one operand requires a gradient::

    with Tape() as tape:
        loss = cross_entropy(net(x), y)
    tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what
inference and fitness evaluation use.
"""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import DimensionError, NumericalError

_ACTIVE_TAPES: List["Tape"] = []


class Tensor:
    """A float64 array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Nodes are appended in execution order, so the list is already a
    topological order of the computation.
    """

    def __init__(self):
        self.nodes: List[_Node] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor):
        backward(loss, self)


def _active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _make(out: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.nodes.append(_Node(tuple(inputs), result, fn))
    return result


def backward(loss: Tensor, tape: Tape):
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate into an existing ``.grad`` (call ``zero_grad``
    between steps); the tape is emptied afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires a gradient")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced and tape.nodes:
        raise ValueError("loss was not recorded on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    owners = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = inp
    # whatever is left was not produced on the tape: leaves
    for key, g in grads.items():
        leaf = owners[key]
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape.nodes.clear()


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), fn)


class ReluPattern:
    """Activation masks of one forward pass, recorded and then replayed.

    While replaying, every relu reuses the mask recorded at the same call
    position, so the network is one smooth linear piece around the recorded
    point.  Finite-difference probes use this to avoid stepping over kinks.
    """

    def __init__(self):
        self.masks: List[np.ndarray] = []
        self.replaying = False
        self._pos = 0

    def rewind(self, replay: bool = True):
        self.replaying = replay
        self._pos = 0

    def next(self, mask: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.masks.append(mask)
            return mask
        if self._pos >= len(self.masks) or self.masks[self._pos].shape != mask.shape:
            raise DimensionError("relu call sequence differs from the recorded pass")
        mask = self.masks[self._pos]
        self._pos += 1
        return mask


_RELU_PATTERN: Optional[ReluPattern] = None


class use_relu_pattern:
    """Context manager that routes relu masks through a ``ReluPattern``."""

    def __init__(self, pattern: ReluPattern):
        self.pattern = pattern

    def __enter__(self):
        global _RELU_PATTERN
        self._prev, _RELU_PATTERN = _RELU_PATTERN, self.pattern
        return self.pattern

    def __exit__(self, *exc):
        global _RELU_PATTERN
        _RELU_PATTERN = self._prev
        return False


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _RELU_PATTERN is not None:
        mask = _RELU_PATTERN.next(mask)
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


# ---------------------------------------------------------------------------
# Shape manipulation and reductions
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"axes {axes} are not a permutation for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)
    src = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the temporal and joint axes of a (B, C, T, V) tensor."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects (B, C, T, V), got {x.shape}")
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _make(out, (a, b), fn)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution over (B, C, T, V) with stride and zero padding along T only."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    B, C, T, V = x.shape
    O, Cw, kt, kv = weight.shape
    if Cw != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride {stride} / padding {padding}")
    Tp = T + 2 * padding
    if kt > Tp or kv > V:
        raise DimensionError(f"kernel {(kt, kv)} larger than padded input {(Tp, V)}")
    t_out = (Tp - kt) // stride + 1
    v_out = V - kv + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (0, 0))) if padding else x.data
    wd = weight.data
    pointwise = kt == 1
    out = np.zeros((B, O, t_out, v_out))
    cols = []  # per kernel column j, reused by the weight gradient
    for j in range(kv):
        xj = xp[:, :, :, j : j + v_out]
        if pointwise:
            xs = np.ascontiguousarray(xj[:, :, : (t_out - 1) * stride + 1 : stride]).reshape(B, C, t_out * v_out)
        else:
            xs = _kernels.im2col(xj, kt, stride, t_out)
        cols.append(xs)
        out += _kernels.tconv_forward_cols(xs, wd[:, :, :, j], t_out, v_out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def fn(g):
        gxp = np.zeros(xp.shape) if x.requires_grad else None
        gw = np.zeros(wd.shape) if weight.requires_grad else None
        for j in range(kv):
            if gxp is not None:
                if pointwise:
                    span = slice(0, (t_out - 1) * stride + 1, stride)
                    g2 = g.reshape(B, O, t_out * v_out)
                    gxp[:, :, span, j : j + v_out] += np.matmul(wd[:, :, 0, j].T, g2).reshape(B, C, t_out, v_out)
                else:
                    gxp[:, :, :, j : j + v_out] += _kernels.tconv_backward_input(g, wd[:, :, :, j], stride, Tp)
            if gw is not None:
                gw[:, :, :, j] = _kernels.tconv_backward_weight_cols(g, cols[j], kt)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding : padding + T] if padding else gxp
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, fn)


# ---------------------------------------------------------------------------
# Normalisation and losses
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)
    return _make(out, (x,), lambda g: (g - y * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    B, C = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(lse - z[rows, labels]))

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / B),)

    return _make(np.array(loss), (logits,), fn)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_running: bool = True,
) -> Tensor:
    """Per-channel normalisation of a (B, C, T, V) tensor.

    With ``training`` the batch statistics are used (and, if
    ``update_running``, folded into the running buffers in place, variance
    unbiased); otherwise the running buffers are used.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if training:
        mu, var = _kernels.channel_moments(x.data)
        if update_running:
            n = x.size // x.shape[1]
            unbiased = var * (n / max(n - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def fn(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            if training:
                gx = _kernels.bn_backward(g * gd, xhat, inv_std)
            else:
                gx = g * gd * inv_std[None, :, None, None]
        return gx, gg, gb

    return _make(out, (x, gamma, beta), fn)


def check_finite(t: Tensor, what: str = "tensor"):
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"non-finite values in {what}")


__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "relu",
    "ReluPattern",
    "use_relu_pattern",
    "exp",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "global_avg_pool",
    "matmul",
    "conv2d",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "batch_norm",
    "check_finite",
]
