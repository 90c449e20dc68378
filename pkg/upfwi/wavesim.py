"""Finite-difference forward modeling of the 2D constant-density acoustic wave equation.

Fields live on the padded grid of shape (nz+2L, nx+2L), indexed [z, x]. The update for every cell outside the
outermost 2-cell ring is

    p[t+1] = (2 - 5a - k) p[t] - (1 - k) p[t-1] - dx^2 a s[t] + a * sum_{i != 0} c_i (p[t](x+i, z) + p[t](x, z+i))

with a = (v dt / dx)^2 and k the sponge damping. The ring is held at zero (Dirichlet).
"""
import math
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import config
from .config import Config
from .errors import InvalidArgumentError, ShapeMismatchError, StabilityError, PropagationDivergedError
from .tools import custom_warning, config_hash, read_json, write_json

logger = logging.getLogger("WaveSim")
warnings.showwarning = custom_warning

# Fourth-order central coefficients of the second derivative
C0 = -5.0 / 2.0
C1 = 4.0 / 3.0
C2 = -1.0 / 12.0
RING = 2


def ricker_wavelet(freq: float, dt: float, nt: int, delay: float = None, amplitude: float = 1.0) -> np.ndarray:
    """Ricker pulse w(t) = A (1 - 2 pi^2 f^2 tau^2) exp(-pi^2 f^2 tau^2), tau = t dt - delay.

    The default delay 1.2/f starts the pulse close to zero amplitude.
    """
    if freq <= 0:
        raise InvalidArgumentError(f"🚨 Ricker frequency must be positive (got {freq})")
    if dt <= 0:
        raise InvalidArgumentError(f"🚨 Time step must be positive (got {dt})")
    if nt < 1:
        raise InvalidArgumentError(f"🚨 The wavelet needs at least one sample (got nt={nt})")
    if delay is None:
        delay = 1.2 / freq
    tau = np.arange(nt, dtype=np.float64) * dt - delay
    arg = (math.pi * freq * tau) ** 2
    return (amplitude * (1.0 - 2.0 * arg) * np.exp(-arg)).astype(np.float32)


@dataclass
class SourceSpec:
    column: int
    depth: int
    wavelet: np.ndarray
    # Ricker parameters the wavelet was built from, kept so that JSON configs stay small
    recipe: dict = None

    @classmethod
    def ricker(cls, column: int, depth: int, freq: float, dt: float, nt: int, delay: float = None, amplitude: float = 1.0):
        if delay is None:
            delay = 1.2 / freq
        recipe = {"freq": float(freq), "delay": float(delay), "amplitude": float(amplitude)}
        return cls(column, depth, ricker_wavelet(freq, dt, nt, delay, amplitude), recipe)

    def to_dict(self) -> dict:
        d = {"column": int(self.column), "depth": int(self.depth)}
        if self.recipe is not None:
            d["wavelet"] = {"ricker": dict(self.recipe)}
        else:
            d["wavelet"] = [float(w) for w in np.asarray(self.wavelet, dtype=np.float32)]
        return d

    @classmethod
    def from_dict(cls, d: dict, dt: float, nt: int):
        wavelet = d["wavelet"]
        if isinstance(wavelet, dict):
            r = wavelet["ricker"]
            return cls.ricker(d["column"], d["depth"], r["freq"], dt, nt, r.get("delay"), r.get("amplitude", 1.0))
        return cls(int(d["column"]), int(d["depth"]), np.asarray(wavelet, dtype=np.float32))


@dataclass
class SimConfig:
    nx: int
    nz: int
    dx: float
    dt: float
    nt: int
    sources: list[SourceSpec]
    receiver_depth: int
    receiver_columns: list[int]
    absorb_layers: int = Config.absorb_layers
    reflection_coeff: float = Config.reflection_coeff

    @property
    def padded_shape(self) -> tuple[int, int]:
        return self.nz + 2 * self.absorb_layers, self.nx + 2 * self.absorb_layers

    @property
    def gather_shape(self) -> tuple[int, int, int]:
        return len(self.sources), self.nt, len(self.receiver_columns)

    def validate(self) -> None:
        if self.nx < 1 or self.nz < 1 or self.nt < 1:
            raise InvalidArgumentError(f"🚨 Grid and time counts must be at least 1 (nx={self.nx}, nz={self.nz}, nt={self.nt})")
        if self.dx <= 0 or self.dt <= 0:
            raise InvalidArgumentError(f"🚨 Grid spacing and time step must be positive (dx={self.dx}, dt={self.dt})")
        if self.absorb_layers < 0:
            raise InvalidArgumentError(f"🚨 Absorbing layer thickness cannot be negative ({self.absorb_layers})")
        if not 0 < self.reflection_coeff < 1:
            raise InvalidArgumentError(f"🚨 Reflection coefficient must be in (0, 1) (got {self.reflection_coeff})")
        if not self.sources:
            raise InvalidArgumentError("🚨 At least one source is needed")
        if not self.receiver_columns:
            raise InvalidArgumentError("🚨 At least one receiver is needed")
        Nz, Nx = self.padded_shape
        if min(Nz, Nx) < 2 * RING + 1:
            raise InvalidArgumentError(f"🚨 Padded grid {Nz}x{Nx} is too small for the fourth-order stencil")
        L = self.absorb_layers
        for i, s in enumerate(self.sources):
            if len(s.wavelet) != self.nt:
                raise ShapeMismatchError(f"🚨 Wavelet of source {i} has {len(s.wavelet)} samples, expected nt={self.nt}")
            if not (RING <= s.depth + L < Nz - RING and RING <= s.column + L < Nx - RING):
                raise InvalidArgumentError(f"🚨 Source {i} at (depth={s.depth}, column={s.column}) falls outside the updated part of the padded grid")
        if not 0 <= self.receiver_depth + L < Nz:
            raise InvalidArgumentError(f"🚨 Receiver depth {self.receiver_depth} is outside the padded grid")
        for c in self.receiver_columns:
            if not 0 <= c + L < Nx:
                raise InvalidArgumentError(f"🚨 Receiver column {c} is outside the padded grid")
        if L < RING:
            warnings.warn(f"⚠️ With {L} absorbing layers the Dirichlet ring overlaps the model; receivers on it record zeros")

    def to_dict(self) -> dict:
        return {"nx": int(self.nx), "nz": int(self.nz), "dx": float(self.dx), "dt": float(self.dt), "nt": int(self.nt),
                "sources": [s.to_dict() for s in self.sources],
                "receiver_depth": int(self.receiver_depth),
                "receiver_columns": [int(c) for c in self.receiver_columns],
                "absorb_layers": int(self.absorb_layers),
                "reflection_coeff": float(self.reflection_coeff)}

    @classmethod
    def from_dict(cls, d: dict):
        missing = {"nx", "nz", "dx", "dt", "nt", "sources", "receiver_depth", "receiver_columns"} - set(d)
        if missing:
            raise InvalidArgumentError(f"🚨 SimConfig is missing the fields {sorted(missing)}")
        sources = [SourceSpec.from_dict(s, d["dt"], d["nt"]) for s in d["sources"]]
        cfg = cls(int(d["nx"]), int(d["nz"]), float(d["dx"]), float(d["dt"]), int(d["nt"]), sources,
                  int(d["receiver_depth"]), [int(c) for c in d["receiver_columns"]],
                  int(d.get("absorb_layers", Config.absorb_layers)), float(d.get("reflection_coeff", Config.reflection_coeff)))
        cfg.validate()
        return cfg

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))

    def with_wavelet_scale(self, factor: float):
        """Same geometry with every wavelet multiplied by 'factor'."""
        sources = [SourceSpec(s.column, s.depth, (np.asarray(s.wavelet) * factor).astype(np.float32),
                              None if s.recipe is None else {**s.recipe, "amplitude": s.recipe["amplitude"] * factor})
                   for s in self.sources]
        return SimConfig(self.nx, self.nz, self.dx, self.dt, self.nt, sources, self.receiver_depth,
                         list(self.receiver_columns), self.absorb_layers, self.reflection_coeff)


@dataclass
class ShotGather:
    data: np.ndarray
    config_hash: str = ""

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Wavefield:
    current: np.ndarray
    previous: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.previous is None:
            self.previous = np.zeros_like(self.current)

    @classmethod
    def zeros(cls, shape, dtype=np.float32):
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


def _evenly_spaced(n: int, count: int) -> list[int]:
    spacing = (n - 1) // (count - 1) if count > 1 else 0
    return [i * spacing for i in range(count)]


def benchmark_geometry(freq: float = 25.0, absorb_layers: int = Config.absorb_layers) -> SimConfig:
    """70x70 map, 5 sources 255 m apart, 70 receivers, 1000 steps of 1 ms, 15 m grid."""
    nt, dt = 1000, 0.001
    sources = [SourceSpec.ricker(c, 0, freq, dt, nt) for c in _evenly_spaced(70, 5)]
    return SimConfig(nx=70, nz=70, dx=15.0, dt=dt, nt=nt, sources=sources, receiver_depth=0,
                     receiver_columns=list(range(70)), absorb_layers=absorb_layers)


def desk_geometry(freq: float = 25.0, absorb_layers: int = 30) -> SimConfig:
    """35x35 map, 3 sources, 35 receivers, 400 steps of 1 ms, 15 m grid."""
    nt, dt = 400, 0.001
    sources = [SourceSpec.ricker(c, 0, freq, dt, nt) for c in _evenly_spaced(35, 3)]
    return SimConfig(nx=35, nz=35, dx=15.0, dt=dt, nt=nt, sources=sources, receiver_depth=0,
                     receiver_columns=list(range(35)), absorb_layers=absorb_layers)


def cfl_ratio(vmap: np.ndarray, config: SimConfig) -> float:
    return float(np.max(vmap)) * config.dt / config.dx


def check_cfl(vmap: np.ndarray, config: SimConfig) -> float:
    ratio = cfl_ratio(vmap, config)
    if not ratio <= Config.cfl_limit:
        raise StabilityError(ratio, Config.cfl_limit)
    return ratio


def pad_velocity(vmap: np.ndarray, absorb_layers: int) -> np.ndarray:
    if absorb_layers == 0:
        return np.array(vmap, copy=True)
    return np.pad(vmap, absorb_layers, mode="edge")


def unpad_adjoint(grad_padded: np.ndarray, absorb_layers: int) -> np.ndarray:
    """Adjoint of edge-replication padding: every pad cell sends its value back to the interior cell it copies."""
    L = absorb_layers
    if L == 0:
        return np.array(grad_padded, copy=True)
    g = np.array(grad_padded, copy=True)
    nz = g.shape[-2] - 2 * L
    nx = g.shape[-1] - 2 * L
    g[..., L, :] += g[..., :L, :].sum(axis=-2)
    g[..., L + nz - 1, :] += g[..., L + nz:, :].sum(axis=-2)
    g = g[..., L:L + nz, :]
    g[..., :, L] += g[..., :, :L].sum(axis=-1)
    g[..., :, L + nx - 1] += g[..., :, L + nx:].sum(axis=-1)
    return g[..., :, L:L + nx]


def damping_distance(config: SimConfig) -> np.ndarray:
    """Distance u (in cells) from every padded cell to the interior rectangle, clipped to L."""
    L = config.absorb_layers
    Nz, Nx = config.padded_shape
    z = np.arange(Nz)
    x = np.arange(Nx)
    uz = np.maximum(np.maximum(L - z, z - (L + config.nz - 1)), 0)
    ux = np.maximum(np.maximum(L - x, x - (L + config.nx - 1)), 0)
    u = np.sqrt(uz[:, None].astype(np.float64) ** 2 + ux[None, :].astype(np.float64) ** 2)
    return np.minimum(u, L)


def damping_factor(config: SimConfig) -> np.ndarray:
    """kappa / v on the padded grid: dt * 3/(2 L dx) * ln(1/R) * (u/L)^2."""
    L = config.absorb_layers
    if L == 0:
        return np.zeros(config.padded_shape)
    u = damping_distance(config)
    return config.dt * 3.0 / (2.0 * L * config.dx) * math.log(1.0 / config.reflection_coeff) * (u / L) ** 2


def damping_profile(config: SimConfig, vmap: np.ndarray) -> np.ndarray:
    """Dimensionless sponge damping kappa >= 0 on the padded grid (zero on the interior)."""
    if config.absorb_layers < 0:
        raise InvalidArgumentError(f"🚨 Absorbing layer thickness cannot be negative ({config.absorb_layers})")
    v_pad = vmap if vmap.shape == config.padded_shape else pad_velocity(vmap, config.absorb_layers)
    return (damping_factor(config) * v_pad).astype(np.float32)


def neighbor_sum(field: np.ndarray) -> np.ndarray:
    """sum_{i != 0} c_i (f(x+i, z) + f(x, z+i)) on the cells outside the 2-cell ring; works on leading batch axes."""
    return (C1 * (field[..., 2:-2, 3:-1] + field[..., 2:-2, 1:-3] + field[..., 3:-1, 2:-2] + field[..., 1:-3, 2:-2])
            + C2 * (field[..., 2:-2, 4:] + field[..., 2:-2, :-4] + field[..., 4:, 2:-2] + field[..., :-4, 2:-2]))


def laplacian(field: np.ndarray, dx: float) -> np.ndarray:
    if field.shape[-1] < 5 or field.shape[-2] < 5:
        raise ShapeMismatchError(f"🚨 The fourth-order Laplacian needs at least 5x5 cells (got {field.shape})")
    out = np.zeros_like(field)
    out[..., 2:-2, 2:-2] = (2.0 * C0 * field[..., 2:-2, 2:-2] + neighbor_sum(field)) / (dx * dx)
    return out


def step(wavefield: Wavefield, vmap: np.ndarray, kappa: np.ndarray, source_injection: np.ndarray, dt: float, dx: float) -> np.ndarray:
    """One explicit time step on the padded grid; returns p[t+1]."""
    for name, grid in (("pressure", wavefield.current), ("previous pressure", wavefield.previous), ("velocity", vmap),
                       ("damping", kappa), ("source", source_injection)):
        if not np.all(np.isfinite(grid)):
            raise PropagationDivergedError(f"🚨 Non-finite values in the {name} grid")
    shape = wavefield.current.shape
    if not (wavefield.previous.shape == vmap.shape == kappa.shape == source_injection.shape == shape):
        raise ShapeMismatchError(f"🚨 Step grids disagree in shape (pressure {shape}, velocity {vmap.shape}, damping {kappa.shape})")
    alpha = (vmap * dt / dx) ** 2
    I = (slice(2, -2), slice(2, -2))
    p, pm = wavefield.current, wavefield.previous
    nxt = np.zeros_like(p)
    nxt[I] = ((2.0 - 5.0 * alpha[I] - kappa[I]) * p[I] - (1.0 - kappa[I]) * pm[I]
              - dx * dx * alpha[I] * source_injection[I] + alpha[I] * neighbor_sum(p))
    return nxt


class _Stencil:
    """Per-velocity coefficients shared by the forward march and its reverse sweep."""

    def __init__(self, vmap: np.ndarray, config: SimConfig, dtype=np.float32):
        config.validate()
        if vmap.shape != (config.nz, config.nx):
            raise ShapeMismatchError(f"🚨 Velocity map has shape {vmap.shape}, the configuration expects {(config.nz, config.nx)}")
        if not np.all(np.isfinite(vmap)) or np.any(vmap <= 0):
            raise InvalidArgumentError("🚨 Velocities must be finite and positive")
        check_cfl(vmap, config)
        self.config = config
        self.dtype = dtype
        L = config.absorb_layers
        self.v_pad = pad_velocity(np.asarray(vmap, dtype=np.float64), L)
        self.alpha = ((self.v_pad * config.dt / config.dx) ** 2).astype(dtype)
        self.kappa_factor = damping_factor(config)
        self.kappa = (self.kappa_factor * self.v_pad).astype(dtype)
        I = (slice(2, -2), slice(2, -2))
        self.alpha_I = self.alpha[I]
        self.A_I = (2.0 - 5.0 * self.alpha[I] - self.kappa[I]).astype(dtype)
        self.B_I = (1.0 - self.kappa[I]).astype(dtype)
        self.n_shots = len(config.sources)
        self.src_z = np.array([s.depth + L for s in config.sources])
        self.src_x = np.array([s.column + L for s in config.sources])
        # (S, nt) wavelets already multiplied by dx^2 * alpha at the source cell
        self.wavelets = np.stack([np.asarray(s.wavelet, dtype=np.float64) for s in config.sources])
        self.src_gain = (config.dx ** 2 * self.alpha[self.src_z, self.src_x].astype(np.float64))
        self.injection = (self.src_gain[:, None] * self.wavelets).astype(dtype)
        self.rec_z = config.receiver_depth + L
        self.rec_x = np.array([c + L for c in config.receiver_columns])

    @property
    def field_shape(self) -> tuple[int, int, int]:
        return (self.n_shots,) + self.config.padded_shape

    def zeros(self) -> np.ndarray:
        return np.zeros(self.field_shape, dtype=self.dtype)

    def advance(self, prev: np.ndarray, cur: np.ndarray, t: int, out: np.ndarray) -> np.ndarray:
        """Writes p[t+1] into 'out' (whose 2-cell ring must already be zero)."""
        out_I = out[..., 2:-2, 2:-2]
        np.multiply(self.A_I, cur[..., 2:-2, 2:-2], out=out_I)
        out_I -= self.B_I * prev[..., 2:-2, 2:-2]
        out_I += self.alpha_I * neighbor_sum(cur)
        out[np.arange(self.n_shots), self.src_z, self.src_x] -= self.injection[:, t]
        return out

    def record(self, cur: np.ndarray) -> np.ndarray:
        return cur[:, self.rec_z, self.rec_x]

    def march(self, prev: np.ndarray, cur: np.ndarray, t_start: int, t_stop: int, gather: np.ndarray = None, store: np.ndarray = None):
        """Advances the state (p[t_start-1], p[t_start]) up to (p[t_stop-1], p[t_stop]).

        Records p[t] for t in [t_start, t_stop) into 'gather' rows and, when given, copies p[t_start..t_stop]
        into store[:, 0..t_stop-t_start].
        """
        prev = prev.copy()
        cur = cur.copy()
        nxt = self.zeros()
        if store is not None:
            store[:, 0] = cur
        for t in range(t_start, t_stop):
            if gather is not None and t < gather.shape[1]:
                gather[:, t, :] = self.record(cur)
            self.advance(prev, cur, t, nxt)
            prev, cur, nxt = cur, nxt, prev
            if store is not None:
                store[:, t + 1 - t_start] = cur
        return prev, cur


def _check_finite(gather: np.ndarray) -> None:
    if not np.all(np.isfinite(gather)):
        raise PropagationDivergedError("🚨 The simulated wavefield diverged (non-finite pressure recorded)")


def forward_model(vmap: np.ndarray, config: SimConfig, dtype=Config.field_dtype) -> ShotGather:
    """Simulates every shot of 'config' through 'vmap' and returns the S x T x R gather."""
    stencil = _Stencil(np.asarray(vmap), config, dtype)
    logger.info(f"Forward modeling {stencil.n_shots} shots, {config.nt} steps on a {config.padded_shape} padded grid")
    gather = np.zeros((stencil.n_shots, config.nt, len(config.receiver_columns)), dtype=dtype)
    stencil.march(stencil.zeros(), stencil.zeros(), 0, config.nt, gather=gather)
    _check_finite(gather)
    return ShotGather(gather, config.hash())
