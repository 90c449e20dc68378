"""Reconstruction losses on shot gathers, metrics on velocity maps and input corruptions for robustness runs.

Loss functions return their value and, on request, the derivative with respect to the reconstructed gather
(the seed that adjoint.backprop consumes).
"""
import math
import logging
from dataclasses import dataclass, asdict

import numpy as np
from skimage.metrics import structural_similarity

from .config import Config
from .errors import InvalidArgumentError, ShapeMismatchError
from .nnet import tensor as T
from .nnet.tensor import Tensor, no_grad
from .nnet.layers import Module, Conv2d, LeakyReLU

logger = logging.getLogger("LossMetrics")

SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class LossWeights:
    pixel_l1: float = 1.0
    pixel_l2: float = 1.0
    feature_l1: float = 1.0
    feature_l2: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise InvalidArgumentError(f"🚨 Loss weight '{name}' cannot be negative (got {value})")

    @property
    def uses_features(self) -> bool:
        return self.feature_l1 > 0 or self.feature_l2 > 0

    @classmethod
    def only_pixel_l2(cls):
        return cls(0.0, 1.0, 0.0, 0.0)

    @classmethod
    def only_pixel_l1l2(cls):
        return cls(1.0, 1.0, 0.0, 0.0)

    @classmethod
    def full(cls):
        return cls(1.0, 1.0, 1.0, 1.0)

    @classmethod
    def preset(cls, name: str):
        presets = {"pixel_l2": cls.only_pixel_l2, "pixel_l1l2": cls.only_pixel_l1l2, "full": cls.full}
        if name not in presets:
            raise InvalidArgumentError(f"🚨 Unknown loss preset '{name}' (expected one of {sorted(presets)})")
        return presets[name]()

    def to_dict(self) -> dict:
        return asdict(self)


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"🚨 {what}: shapes {a.shape} and {b.shape} differ")


def pixel_loss(target, reconstruction, l1: float = 1.0, l2: float = 1.0, with_seed: bool = False):
    """l1 * mean|p - p~| + l2 * mean (p - p~)^2, with the derivative w.r.t. p~ if requested."""
    target = np.asarray(target)
    reconstruction = np.asarray(reconstruction)
    _check_shapes(target, reconstruction, "pixel_loss")
    diff = reconstruction.astype(np.float64) - target
    n = diff.size
    value = l1 * float(np.mean(np.abs(diff))) + l2 * float(np.mean(diff * diff))
    if not with_seed:
        return value
    seed = (l1 * np.sign(diff) + 2.0 * l2 * diff) / n
    return value, seed.astype(reconstruction.dtype if reconstruction.dtype.kind == "f" else np.float32)


class IdentityExtractor(Module):

    def forward(self, x: Tensor) -> Tensor:
        return x


class FeatureExtractor(Module):
    """Fixed random convolutional stack (1 -> 8 -> 16 -> 16 channels, 3x3, stride 2, leaky ReLU).

    Gathers enter as a batch of single-channel (time x receiver) images, one per shot. The weights are drawn
    once from 'seed' and never trained.
    """

    def __init__(self, seed: int = 0, channels: tuple = (8, 16, 16), slope: float = 0.2, dtype=Config.field_dtype):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.slope = slope
        convs = []
        in_ch = 1
        for out_ch in channels:
            convs.append(Conv2d(in_ch, out_ch, (3, 3), (2, 2), (1, 1), rng))
            in_ch = out_ch
        self.convs = convs
        self.act = LeakyReLU(slope)
        self.to(dtype)
        for p in self.parameters().values():
            p.requires_grad = False
            p.data.setflags(write=False)

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = self.act(conv(x))
        return x


def _as_images(gather: np.ndarray) -> np.ndarray:
    # (S, T, R) -> (S, 1, T, R)
    if gather.ndim == 2:
        gather = gather[None]
    return gather[:, None, :, :]


def feature_loss(target, reconstruction, extractor: Module = None, l3: float = 1.0, l4: float = 1.0, with_seed: bool = False):
    """l3 * mean|phi(p) - phi(p~)| + l4 * mean (phi(p) - phi(p~))^2 through a fixed extractor phi."""
    target = np.asarray(target)
    reconstruction = np.asarray(reconstruction)
    _check_shapes(target, reconstruction, "feature_loss")
    extractor = extractor if extractor is not None else FeatureExtractor()
    params = list(extractor.parameters().values())
    if params:
        dtype = params[0].data.dtype
    else:
        dtype = np.float64 if reconstruction.dtype == np.float64 else np.float32
    with no_grad():
        target_features = extractor(Tensor(_as_images(target).astype(dtype)))
    x = Tensor(_as_images(reconstruction).astype(dtype), requires_grad=with_seed)
    diff = T.sub(extractor(x), target_features)
    loss = T.add(T.mul(T.mean(T.tensor_abs(diff)), l3), T.mul(T.mean(T.square(diff)), l4))
    value = float(loss.data)
    if not with_seed:
        return value
    loss.backward()
    return value, x.grad[:, 0].reshape(reconstruction.shape).astype(reconstruction.dtype, copy=False)


class ReconstructionLoss(object):
    """Pixel plus feature loss between an observed gather and its reconstruction."""

    def __init__(self, weights: LossWeights = None, extractor: Module = None):
        self.weights = weights if weights is not None else LossWeights()
        self.extractor = extractor
        if self.weights.uses_features and self.extractor is None:
            self.extractor = FeatureExtractor()

    def __call__(self, target, reconstruction) -> tuple[float, np.ndarray]:
        w = self.weights
        value, seed = pixel_loss(target, reconstruction, w.pixel_l1, w.pixel_l2, with_seed=True)
        if w.uses_features:
            f_value, f_seed = feature_loss(target, reconstruction, self.extractor, w.feature_l1, w.feature_l2, with_seed=True)
            value += f_value
            seed = seed + f_seed
        return value, seed

    def against(self, target, scale: float = 1.0):
        """loss_fn(gather) -> (value, seed) comparing gather/scale with 'target' (already divided by scale)."""
        target = np.asarray(target)

        def loss_fn(gather):
            value, seed = self(target, np.asarray(gather) / scale)
            return value, (seed / scale).astype(np.asarray(gather).dtype)
        return loss_fn


def normalize_velocity(v, v_min: float = Config.velocity_min, v_max: float = Config.velocity_max) -> np.ndarray:
    return 2.0 * (np.asarray(v, dtype=np.float64) - v_min) / (v_max - v_min) - 1.0


def denormalize_velocity(v, v_min: float = Config.velocity_min, v_max: float = Config.velocity_max) -> np.ndarray:
    return (np.asarray(v, dtype=np.float64) + 1.0) * 0.5 * (v_max - v_min) + v_min


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 2.0) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5) of two 2D arrays."""
    return float(structural_similarity(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64),
                                       data_range=data_range, gaussian_weights=True, sigma=SSIM_SIGMA,
                                       use_sample_covariance=False, K1=SSIM_K1, K2=SSIM_K2))


def velocity_metrics(v_true, v_pred, v_min: float = Config.velocity_min, v_max: float = Config.velocity_max) -> dict:
    """MAE and MSE in m/s, SSIM on maps mapped to [-1, 1]. Batches (N, H, W) are averaged over N."""
    v_true = np.asarray(v_true, dtype=np.float64)
    v_pred = np.asarray(v_pred, dtype=np.float64)
    _check_shapes(v_true, v_pred, "velocity_metrics")
    diff = v_pred - v_true
    maps_true = normalize_velocity(v_true, v_min, v_max).reshape((-1,) + v_true.shape[-2:])
    maps_pred = normalize_velocity(v_pred, v_min, v_max).reshape((-1,) + v_true.shape[-2:])
    ssims = [ssim(t, p) for t, p in zip(maps_true, maps_pred)]
    return {"mae": float(np.mean(np.abs(diff))), "mse": float(np.mean(diff * diff)), "ssim": float(np.mean(ssims))}


def seismic_metrics(p, p_tilde) -> dict:
    """MAE, MSE and per-shot SSIM between a normalized gather and its reconstruction."""
    p = np.asarray(p, dtype=np.float64)
    p_tilde = np.asarray(p_tilde, dtype=np.float64)
    _check_shapes(p, p_tilde, "seismic_metrics")
    diff = p_tilde - p
    shots_true = p.reshape((-1,) + p.shape[-2:])
    shots_pred = p_tilde.reshape((-1,) + p.shape[-2:])
    ssims = [ssim(a, b) for a, b in zip(shots_true, shots_pred)]
    return {"mae": float(np.mean(np.abs(diff))), "mse": float(np.mean(diff * diff)), "ssim": float(np.mean(ssims))}


def psnr(clean: np.ndarray, corrupted: np.ndarray) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    mse = float(np.mean((np.asarray(corrupted, dtype=np.float64) - clean) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(np.max(np.abs(clean)))
    if peak == 0.0:
        return -math.inf
    return 10.0 * math.log10(peak * peak / mse)


def add_gaussian_noise(gather, sigma: float, seed: int = 0) -> tuple[np.ndarray, float]:
    """Adds iid N(0, sigma^2) noise. Returns the noisy gather and its PSNR against the clean one (peak max|clean|)."""
    if sigma < 0:
        raise InvalidArgumentError(f"🚨 Noise level must be non-negative (got {sigma})")
    gather = np.asarray(gather)
    if sigma == 0:
        return gather.copy(), math.inf
    rng = np.random.default_rng(seed)
    noisy = (gather + rng.normal(0.0, sigma, size=gather.shape)).astype(gather.dtype)
    return noisy, psnr(gather, noisy)


def drop_traces(gather, k: int, seed: int = 0) -> np.ndarray:
    """Zeroes k distinct receiver columns (last axis), the same ones for every shot and time step."""
    gather = np.asarray(gather)
    R = gather.shape[-1]
    if not 0 <= k <= R:
        raise InvalidArgumentError(f"🚨 Cannot drop {k} traces out of {R} receivers")
    rng = np.random.default_rng(seed)
    columns = rng.choice(R, size=k, replace=False)
    out = gather.copy()
    out[..., columns] = 0
    return out
