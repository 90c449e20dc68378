"""Dense tensors with a reverse-mode tape.

Every op builds a node holding its parents and a closure mapping the output gradient to the parents' gradients.
Tensor.backward() walks the graph in reverse topological order and accumulates into leaf '.grad' buffers.
"""
import itertools
import logging
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import config

logger = logging.getLogger("NNet")

_node_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_array(data, dtype=None) -> np.ndarray:
    array = np.asarray(data)
    if dtype is not None:
        return array.astype(dtype, copy=False)
    if array.dtype == np.float64:
        return array
    return array.astype(np.float32, copy=False)


class Tensor:

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward=None, op: str = "leaf"):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op
        self.node_id = next(_node_ids)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"🚨 backward() without a seed needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = _as_array(grad, self.data.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"🚨 Seed gradient has shape {grad.shape}, output is {self.shape}")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in visited:
                continue
            visited.add(node.node_id)
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and parent.node_id not in visited:
                    stack.append((parent, False))
        grads = {self.node_id: grad}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + parent_grad
                else:
                    grads[parent.node_id] = parent_grad

    # Operators
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

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # Plain numbers take the dtype of the tensor they meet
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _make(data, parents, backward, op) -> Tensor:
    if config.nan_check and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"🚨 Non-finite values produced by '{op}'")
    requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tensor_sum(a, axis, keepdims), 1.0 / count)


def tensor_abs(a: Tensor) -> Tensor:
    # The subgradient at zero is 0
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    positive = a.data > 0
    return _make(np.where(positive, a.data, slope * a.data), (a,),
                 lambda g: (np.where(positive, g, slope * g),), "leaky_relu")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """NCHW cross-correlation with zero padding."""
    N, C, H, W = x.shape
    O, C_w, kh, kw = weight.shape
    if C != C_w:
        raise ValueError(f"🚨 conv2d input has {C} channels, the kernel expects {C_w}")
    sh, sw = stride
    ph, pw = padding
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"🚨 conv2d output would be empty ({Ho}x{Wo}) for input {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g_weight = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        g_cols = np.tensordot(g, weight.data, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
        g_xp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                g_xp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += g_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        g_x = g_xp[:, :, ph:ph + H, pw:pw + W]
        g_bias = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return g_x, g_weight, g_bias

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def normalize(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple, eps: float, mean_value=None, var_value=None):
    """Affine normalization over 'axes'. Statistics are computed from x unless fixed ones are given.

    Returns the output tensor and the (mean, var) used.
    """
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    g_param = gamma.data.reshape(shape)
    fixed = mean_value is not None
    if fixed:
        mu = mean_value.reshape(shape)
        var = var_value.reshape(shape)
    else:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv_std
    out = g_param * x_hat + beta.data.reshape(shape)
    count = int(np.prod([x.shape[a] for a in axes]))
    param_axes = tuple(a for a in range(x.ndim) if a != 1)

    def backward(g):
        g_gamma = (g * x_hat).sum(axis=param_axes)
        g_beta = g.sum(axis=param_axes)
        g_hat = g * g_param
        if fixed:
            g_x = g_hat * inv_std
        else:
            g_x = inv_std / count * (count * g_hat - g_hat.sum(axis=axes, keepdims=True)
                                     - x_hat * (g_hat * x_hat).sum(axis=axes, keepdims=True))
        return g_x, g_gamma, g_beta

    return _make(out, (x, gamma, beta), backward, "normalize"), (mu, var)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    N, C, H, W = x.shape
    return _make(out, (x,), lambda g: (g.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5)),), "upsample")


def center_crop(x: Tensor, height: int, width: int) -> Tensor:
    H, W = x.shape[2], x.shape[3]
    top = (H - height) // 2
    left = (W - width) // 2

    def backward(g):
        g_x = np.zeros(x.shape, dtype=g.dtype)
        g_x[:, :, top:top + height, left:left + width] = g
        return (g_x,)
    return _make(x.data[:, :, top:top + height, left:left + width].copy(), (x,), backward, "center_crop")


def tile(x: Tensor, height: int, width: int) -> Tensor:
    """(N, C) -> (N, C, height, width) by repetition."""
    out = np.broadcast_to(x.data[:, :, None, None], x.shape + (height, width)).copy()
    return _make(out, (x,), lambda g: (g.sum(axis=(2, 3)),), "tile")
