"""Encoder-decoder that maps a stack of shot gathers (S x T x R) to a velocity map (H x W) in [-1, 1].

Encoder: one 7x1 and six 3x1 convolutions over time, six 3x3 convolutions, flatten and a fully connected layer
to the latent vector. Decoder: the latent vector tiled to 5x5, 3x3 convolutions with nearest upsampling until the
map covers H x W, a center crop and a last 3x3 convolution to one channel followed by tanh.
"""
import math
import logging
from dataclasses import dataclass, asdict

import numpy as np

from ..errors import InvalidArgumentError, ShapeMismatchError
from .tensor import Tensor
from .layers import Module, Sequential, ConvBlock, Conv2d, Linear, Flatten, Tile, Upsample, CenterCrop, Tanh

logger = logging.getLogger("NNet")

TEMPORAL_CHANNELS = [32, 64, 64, 64, 64, 128, 128]
TEMPORAL_STRIDES = [2, 1, 2, 1, 2, 1]
SPATIAL_CHANNELS = [128, 128, 256, 256, 256, 256]
SPATIAL_STRIDES = [2, 1, 2, 1, 2, 1]
DECODER_BASE = 32
LATENT_SIDE = 5


@dataclass
class NetConfig:
    n_sources: int = 5
    n_time: int = 1000
    n_receivers: int = 70
    out_height: int = 70
    out_width: int = 70
    latent_dim: int = 512
    channel_scale: float = 1.0
    slope: float = 0.2
    norm: str = "batch"
    first_temporal_stride: int = 2
    time_decimation: int = 1
    seed: int = 0

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.n_sources, self.n_time, self.n_receivers

    @property
    def output_shape(self) -> tuple[int, int]:
        return self.out_height, self.out_width

    def channels(self, base: int) -> int:
        return max(1, math.ceil(base * self.channel_scale))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"🚨 Unknown NetConfig fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def for_simulation(cls, sim, time_decimation: int = 1, **kwargs):
        """Input and output shapes taken from a SimConfig."""
        S, nt, R = sim.gather_shape
        return cls(n_sources=S, n_time=math.ceil(nt / time_decimation), n_receivers=R, out_height=sim.nz,
                   out_width=sim.nx, time_decimation=time_decimation, **kwargs)

    @classmethod
    def desk(cls, sim=None, seed: int = 0):
        """Quarter-width network on gathers decimated by 4 in time, without the first temporal stride."""
        if sim is None:
            from ..wavesim import desk_geometry
            sim = desk_geometry()
        return cls.for_simulation(sim, time_decimation=4, latent_dim=128, channel_scale=0.25, first_temporal_stride=1,
                                  seed=seed)


def decoder_stages(height: int, width: int) -> int:
    k = 0
    while LATENT_SIDE * 2 ** k < max(height, width):
        k += 1
    return k


class InversionNet(Module):

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        S, T_len, R = cfg.input_shape
        if cfg.channel_scale <= 0 or cfg.channel_scale > 1:
            raise InvalidArgumentError(f"🚨 channel_scale must be in (0, 1] (got {cfg.channel_scale})")
        if T_len < 64:
            raise InvalidArgumentError(f"🚨 The network needs at least 64 time samples at its input (got {T_len})")
        rng = np.random.default_rng(cfg.seed)
        block = dict(rng=rng, slope=cfg.slope, norm=cfg.norm)
        shape = (T_len, R)
        layers = []
        in_ch = S
        kernels = [(7, 1)] + [(3, 1)] * len(TEMPORAL_STRIDES)
        strides = [cfg.first_temporal_stride] + TEMPORAL_STRIDES
        for i, (kernel, stride, base) in enumerate(zip(kernels, strides, TEMPORAL_CHANNELS)):
            out_ch = cfg.channels(base)
            layer = ConvBlock(in_ch, out_ch, kernel, (stride, 1), (kernel[0] // 2, 0), **block)
            shape = self._check(layer.conv.output_shape(*shape), f"temporal conv {i + 1} ({kernel[0]}x1, stride {stride})")
            layers.append(layer)
            in_ch = out_ch
        for i, (stride, base) in enumerate(zip(SPATIAL_STRIDES, SPATIAL_CHANNELS)):
            out_ch = cfg.channels(base)
            layer = ConvBlock(in_ch, out_ch, (3, 3), (stride, stride), (1, 1), **block)
            shape = self._check(layer.conv.output_shape(*shape), f"spatial conv {i + 1} (3x3, stride {stride})")
            layers.append(layer)
            in_ch = out_ch
        self.encoder = Sequential(*layers)
        self.flatten = Flatten()
        self.fc = Linear(in_ch * shape[0] * shape[1], cfg.latent_dim, rng)
        self.tile = Tile(LATENT_SIDE, LATENT_SIDE)
        k = decoder_stages(cfg.out_height, cfg.out_width)
        ladder = [DECODER_BASE * 2 ** (k - 1 - i) for i in range(k)] + [DECODER_BASE]
        layers = []
        in_ch = cfg.latent_dim
        for i, base in enumerate(ladder):
            out_ch = cfg.channels(base)
            layers.append(ConvBlock(in_ch, out_ch, (3, 3), (1, 1), (1, 1), **block))
            if i < k:
                layers.append(Upsample(2))
            in_ch = out_ch
        self.decoder = Sequential(*layers)
        self.crop = CenterCrop(cfg.out_height, cfg.out_width)
        self.head = Conv2d(in_ch, 1, (3, 3), (1, 1), (1, 1), rng)
        self.squash = Tanh()
        logger.info(f"Built inversion network {cfg.input_shape} -> {cfg.output_shape} with {self.parameter_count()} parameters")

    @staticmethod
    def _check(shape: tuple[int, int], layer: str) -> tuple[int, int]:
        if shape[0] < 1 or shape[1] < 1:
            raise InvalidArgumentError(f"🚨 Shape arithmetic fails at {layer}: output would be {shape[0]}x{shape[1]}")
        return shape

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters().values()))

    def forward(self, x: Tensor) -> Tensor:
        h = self.fc(self.flatten(self.encoder(x)))
        h = self.crop(self.decoder(self.tile(h)))
        out = self.squash(self.head(h))
        return out.reshape((out.shape[0], out.shape[2], out.shape[3]))


def build_inversion_net(cfg: NetConfig) -> InversionNet:
    return InversionNet(cfg)


def count_parameters(cfg: NetConfig) -> int:
    return build_inversion_net(cfg).parameter_count()


def prepare_input(gathers: np.ndarray, cfg: NetConfig, data_scale: float = 1.0) -> np.ndarray:
    """Scales raw gathers (N, S, nt, R) by 1/data_scale and decimates them in time to the network input."""
    gathers = np.asarray(gathers, dtype=np.float32)
    if gathers.ndim == 3:
        gathers = gathers[None]
    x = gathers[:, :, ::cfg.time_decimation, :] / np.float32(data_scale)
    return np.ascontiguousarray(x, dtype=np.float32)


def forward(net: InversionNet, gather_batch) -> Tensor:
    """Batch of normalized network inputs (N, S, T, R) -> batch of normalized maps (N, H, W)."""
    x = gather_batch if isinstance(gather_batch, Tensor) else Tensor(gather_batch)
    if x.ndim != 4 or tuple(x.shape[1:]) != net.cfg.input_shape:
        raise ShapeMismatchError(f"🚨 Network expects inputs of shape (N, {', '.join(map(str, net.cfg.input_shape))}), got {x.shape}")
    return net(x)
