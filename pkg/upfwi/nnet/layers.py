import math
import logging

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger("NNet")


class Parameter(Tensor):

    def __init__(self, data):
        super().__init__(data, requires_grad=True, op="parameter")


class Module(object):
    """Base class of layers and networks.

    Parameters and buffers are discovered from the instance attributes in assignment order, so their names and
    ordering are a deterministic function of the construction code.
    """

    def __init__(self):
        self.training = True

    def __call__(self, *args):
        return self.forward(*args)

    def forward(self, *args):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def parameters(self, prefix: str = "") -> dict[str, Parameter]:
        params = {}
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                params[prefix + name] = value
        for name, child in self._children():
            params.update(child.parameters(f"{prefix}{name}."))
        return params

    def buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        found = {}
        for name in getattr(self, "_buffer_names", ()):
            found[prefix + name] = getattr(self, name)
        for name, child in self._children():
            found.update(child.buffers(f"{prefix}{name}."))
        return found

    def load_buffers(self, values: dict[str, np.ndarray], prefix: str = "") -> None:
        for name in getattr(self, "_buffer_names", ()):
            key = prefix + name
            if key in values:
                setattr(self, name, np.asarray(values[key], dtype=getattr(self, name).dtype).copy())
        for name, child in self._children():
            child.load_buffers(values, f"{prefix}{name}.")

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def to(self, dtype):
        """Casts parameters and buffers in place (float64 is used by finite-difference checks)."""
        for value in vars(self).values():
            if isinstance(value, Parameter):
                value.data = value.data.astype(dtype)
        for name in getattr(self, "_buffer_names", ()):
            setattr(self, name, getattr(self, name).astype(dtype))
        for _, child in self._children():
            child.to(dtype)
        return self


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):

    def __init__(self, in_channels: int, out_channels: int, kernel: tuple, stride: tuple = (1, 1), padding: tuple = (0, 0),
                 rng: np.random.Generator = None, bias: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = kernel
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.weight = Parameter(he_normal(rng, (out_channels, in_channels, kh, kw), in_channels * kh * kw))
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, height: int, width: int) -> tuple[int, int]:
        _, _, kh, kw = self.weight.shape
        return ((height + 2 * self.padding[0] - kh) // self.stride[0] + 1,
                (width + 2 * self.padding[1] - kw) // self.stride[1] + 1)


class BatchNorm2d(Module):
    """Per-channel normalization with a learned affine map.

    mode="batch" normalizes over (N, H, W) in training and uses running averages in inference;
    mode="instance" always normalizes each sample over (H, W) and keeps no running statistics.
    """
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, mode: str = "batch", momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if mode not in ("batch", "instance"):
            raise ValueError(f"🚨 Unknown normalization mode '{mode}' (expected 'batch' or 'instance')")
        self.mode = mode
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "instance":
            out, _ = T.normalize(x, self.gamma, self.beta, (2, 3), self.eps)
            return out
        if not self.training:
            out, _ = T.normalize(x, self.gamma, self.beta, (0, 2, 3), self.eps, self.running_mean, self.running_var)
            return out
        out, (mu, var) = T.normalize(x, self.gamma, self.beta, (0, 2, 3), self.eps)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var.reshape(-1) * count / max(count - 1, 1)
        self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * mu.reshape(-1)).astype(self.running_mean.dtype)
        self.running_var = ((1 - self.momentum) * self.running_var + self.momentum * unbiased).astype(self.running_var.dtype)
        return out


class LeakyReLU(Module):

    def __init__(self, slope: float = 0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return T.leaky_relu(x, self.slope)


class Tanh(Module):

    def forward(self, x: Tensor) -> Tensor:
        return T.tanh(x)


class Linear(Module):

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(he_normal(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Flatten(Module):

    def forward(self, x: Tensor) -> Tensor:
        return x.reshape((x.shape[0], -1))


class Tile(Module):

    def __init__(self, height: int, width: int):
        super().__init__()
        self.height = height
        self.width = width

    def forward(self, x: Tensor) -> Tensor:
        return T.tile(x, self.height, self.width)


class Upsample(Module):

    def __init__(self, factor: int = 2):
        super().__init__()
        self.factor = factor

    def forward(self, x: Tensor) -> Tensor:
        return T.upsample_nearest(x, self.factor)


class CenterCrop(Module):

    def __init__(self, height: int, width: int):
        super().__init__()
        self.height = height
        self.width = width

    def forward(self, x: Tensor) -> Tensor:
        return T.center_crop(x, self.height, self.width)


class ConvBlock(Module):
    """Convolution, normalization and leaky ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel: tuple, stride: tuple, padding: tuple,
                 rng: np.random.Generator, slope: float = 0.2, norm: str = "batch"):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, stride, padding, rng)
        self.norm = BatchNorm2d(out_channels, norm)
        self.act = LeakyReLU(slope)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.norm(self.conv(x)))


class Sequential(Module):

    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
