"""Reverse-mode derivative of the discrete time-stepping recurrence with respect to the velocity map.

The adjoint variable lam[t] = dL/dp[t] obeys, on the updated cells,

    lam[t] = seed[t] + A lam[t+1] + N(a lam[t+1]) - B lam[t+2]

where A = 2 - 5a - k, B = 1 - k and N is the (self-adjoint) neighbor stencil. Each step t also contributes

    dL/da += lam[t+1] (-5 p[t] + N(p[t]) - dx^2 s[t])        dL/dk += lam[t+1] (p[t-1] - p[t])

which are chained through a = (v dt/dx)^2, k = v * factor and the edge-replication padding.

The taped march and the sweep run in Config.tape_dtype; only the returned gather and gradient are cast to the
requested precision. Summing these products over time in 32 bits loses several digits to cancellation.
"""
import math
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .config import Config
from .errors import ShapeMismatchError, GeometryMismatchError
from .tools import custom_warning
from .wavesim import SimConfig, ShotGather, _Stencil, _check_finite, neighbor_sum, unpad_adjoint, forward_model

logger = logging.getLogger("Adjoint")
warnings.showwarning = custom_warning


@dataclass
class CheckpointPolicy:
    """'full' stores every snapshot, 'segments' stores one state every 'segment' steps and recomputes, 'auto' picks."""
    kind: str = "auto"
    memory_budget: int = 2 * 1024 ** 3
    segment: int = None


class Tape:
    """Forward snapshots of every shot, either complete or as segment checkpoints."""

    def __init__(self, stencil: _Stencil, gather: np.ndarray, config_hash: str, snapshots: np.ndarray = None,
                 checkpoints: dict = None, segment: int = None, out_dtype=Config.field_dtype):
        self.out_dtype = out_dtype
        self.stencil = stencil
        self.gather = gather
        self.config_hash = config_hash
        self.snapshots = snapshots
        self.checkpoints = checkpoints
        self.segment = segment

    @property
    def config(self) -> SimConfig:
        return self.stencil.config

    @property
    def storage(self) -> str:
        return "full" if self.snapshots is not None else "segments"

    def nbytes(self) -> int:
        if self.snapshots is not None:
            return self.snapshots.nbytes
        return sum(a.nbytes + b.nbytes for a, b in self.checkpoints.values())

    def segment_snapshots(self, t0: int, t1: int) -> np.ndarray:
        """Recomputes p[t0-1 .. t1] from the checkpoint at t0, stacked on axis 1."""
        prev, cur = self.checkpoints[t0]
        out = np.zeros((self.stencil.n_shots, t1 - t0 + 2) + self.config.padded_shape, dtype=self.stencil.dtype)
        out[:, 0] = prev
        self.stencil.march(prev, cur, t0, t1, store=out[:, 1:])
        return out

    def replay(self) -> np.ndarray:
        """Re-derives the recorded gather from the stored states."""
        s = self.stencil
        nt = self.config.nt
        gather = np.zeros_like(self.gather)
        if self.snapshots is not None:
            gather[:] = self.snapshots[:, :nt, s.rec_z][..., s.rec_x]
            return gather
        for t0 in sorted(self.checkpoints):
            prev, cur = self.checkpoints[t0]
            s.march(prev, cur, t0, min(t0 + self.segment, nt), gather=gather)
        return gather


def _plan_storage(stencil: _Stencil, policy: CheckpointPolicy) -> int | None:
    """Returns None for full storage or the segment length for checkpointing."""
    nt = stencil.config.nt
    frame = int(np.prod(stencil.field_shape)) * np.dtype(stencil.dtype).itemsize
    full_bytes = frame * (nt + 1)
    if policy.kind == "full" or (policy.kind == "auto" and full_bytes <= policy.memory_budget):
        return None
    if policy.segment is not None:
        segment = policy.segment
    else:
        # Two frames per checkpoint plus one recomputed segment buffer
        segment = max(1, int(math.ceil(math.sqrt(2 * (nt + 1)))))
    needed = frame * (2 * math.ceil(nt / segment) + segment + 2)
    if policy.kind == "auto" and needed > policy.memory_budget:
        raise MemoryError(f"🚨 Even with checkpointing the tape needs {needed / 2 ** 20:.1f} MiB, above the budget of {policy.memory_budget / 2 ** 20:.1f} MiB")
    if policy.kind == "auto":
        logger.info(f"Full tape would take {full_bytes / 2 ** 20:.1f} MiB, switching to checkpoints every {segment} steps")
    return segment


def forward_with_tape(vmap: np.ndarray, config: SimConfig, policy: CheckpointPolicy = None, dtype=Config.field_dtype) -> tuple[ShotGather, Tape]:
    policy = policy or CheckpointPolicy()
    stencil = _Stencil(np.asarray(vmap), config, Config.tape_dtype)
    nt = config.nt
    gather = np.zeros(config.gather_shape, dtype=Config.tape_dtype)
    segment = _plan_storage(stencil, policy)
    if segment is None:
        snapshots = np.zeros((stencil.n_shots, nt + 1) + config.padded_shape, dtype=stencil.dtype)
        stencil.march(stencil.zeros(), stencil.zeros(), 0, nt, gather=gather, store=snapshots)
        tape = Tape(stencil, gather, config.hash(), snapshots=snapshots, out_dtype=dtype)
    else:
        checkpoints = {}
        prev, cur = stencil.zeros(), stencil.zeros()
        for t0 in range(0, nt, segment):
            checkpoints[t0] = (prev.copy(), cur.copy())
            prev, cur = stencil.march(prev, cur, t0, min(t0 + segment, nt), gather=gather)
        tape = Tape(stencil, gather, config.hash(), checkpoints=checkpoints, segment=segment, out_dtype=dtype)
    _check_finite(gather)
    logger.info(f"Taped forward run ({tape.storage} storage, {tape.nbytes() / 2 ** 20:.1f} MiB)")
    return ShotGather(gather.astype(dtype), tape.config_hash), tape


def backprop(tape: Tape, gather_grad: np.ndarray) -> np.ndarray:
    """dL/dv on the interior grid given dL/d(gather)."""
    gather_grad = np.asarray(getattr(gather_grad, "data", gather_grad))
    if gather_grad.shape != tape.gather.shape:
        raise ShapeMismatchError(f"🚨 Adjoint seed has shape {gather_grad.shape}, the taped gather is {tape.gather.shape}")
    s = tape.stencil
    cfg = tape.config
    nt = cfg.nt
    dtype = s.dtype
    seed = gather_grad.astype(dtype)
    shots = np.arange(s.n_shots)
    lam_next = s.zeros()   # lam[t+1]
    lam_next2 = s.zeros()  # lam[t+2]
    lam = s.zeros()
    weighted = s.zeros()
    g_alpha = np.zeros(cfg.padded_shape, dtype=dtype)
    g_kappa = np.zeros(cfg.padded_shape, dtype=dtype)
    g_alpha_I = g_alpha[2:-2, 2:-2]
    g_kappa_I = g_kappa[2:-2, 2:-2]
    zero = s.zeros()
    segment = tape.segment or nt
    for t0 in reversed(range(0, nt, segment)):
        t1 = min(t0 + segment, nt)
        if tape.snapshots is not None:
            frames, offset = tape.snapshots, 0
        else:
            # frames[:, k] = p[t0 - 1 + k]
            frames, offset = tape.segment_snapshots(t0, t1), 1 - t0
        for t in range(t1 - 1, t0 - 1, -1):
            p = frames[:, t + offset]
            p_prev = frames[:, t + offset - 1] if t + offset > 0 else zero
            lam_I = lam_next[..., 2:-2, 2:-2]
            # parameter sensitivities of step t (p[t] -> p[t+1])
            g_alpha_I += np.sum(lam_I * (-5.0 * p[..., 2:-2, 2:-2] + neighbor_sum(p)), axis=0)
            np.subtract.at(g_alpha, (s.src_z, s.src_x), (lam_next[shots, s.src_z, s.src_x] * cfg.dx ** 2 * s.wavelets[:, t]).astype(dtype))
            g_kappa_I += np.sum(lam_I * (p_prev[..., 2:-2, 2:-2] - p[..., 2:-2, 2:-2]), axis=0)
            if t == 0:
                break
            # lam[t]
            lam.fill(0.0)
            weighted[..., 2:-2, 2:-2] = s.alpha_I * lam_I
            lam_t_I = lam[..., 2:-2, 2:-2]
            np.multiply(s.A_I, lam_I, out=lam_t_I)
            lam_t_I += neighbor_sum(weighted)
            lam_t_I -= s.B_I * lam_next2[..., 2:-2, 2:-2]
            np.add.at(lam, (slice(None), s.rec_z, s.rec_x), seed[:, t, :])
            lam[..., :2, :] = 0.0
            lam[..., -2:, :] = 0.0
            lam[..., :, :2] = 0.0
            lam[..., :, -2:] = 0.0
            lam_next2, lam_next, lam = lam_next, lam, lam_next2
    v = s.v_pad
    g_v_pad = g_alpha.astype(np.float64) * 2.0 * s.alpha / v + g_kappa.astype(np.float64) * s.kappa_factor
    return unpad_adjoint(g_v_pad, cfg.absorb_layers).astype(tape.out_dtype)


def gradient(vmap: np.ndarray, config: SimConfig, loss_fn, policy: CheckpointPolicy = None, dtype=Config.field_dtype):
    """Returns (loss, gather, dL/dv) for loss_fn(gather) -> (value, seed).

    The loss sees the full-precision taped gather; the returned gather and gradient are in 'dtype'.
    """
    gather, tape = forward_with_tape(vmap, config, policy, dtype)
    value, seed = loss_fn(tape.gather)
    return value, gather, backprop(tape, seed)


def _loss_value(vmap, config, loss_fn, dtype) -> float:
    value, _ = loss_fn(forward_model(vmap, config, dtype).data)
    return float(value)


def grad_check(vmap: np.ndarray, config: SimConfig, loss_fn, cells, eps: float = 0.1, fd_dtype=np.float64,
               adjoint_dtype=Config.field_dtype) -> dict:
    """Compares the reverse-mode gradient at the given (z, x) cells with central differences.

    The adjoint runs in the production precision, the finite differences in 'fd_dtype'.
    """
    vmap = np.asarray(vmap, dtype=np.float64)
    _, _, g = gradient(vmap.astype(adjoint_dtype), config, loss_fn, dtype=adjoint_dtype)
    rows = []
    for z, x in cells:
        if not (0 <= z < config.nz and 0 <= x < config.nx):
            raise GeometryMismatchError(f"🚨 Cell ({z}, {x}) is outside the {config.nz}x{config.nx} model")
        plus = vmap.copy()
        plus[z, x] += eps
        minus = vmap.copy()
        minus[z, x] -= eps
        g_fd = (_loss_value(plus, config, loss_fn, fd_dtype) - _loss_value(minus, config, loss_fn, fd_dtype)) / (2 * eps)
        g_adj = float(g[z, x])
        rel = abs(g_adj - g_fd) / max(abs(g_adj), abs(g_fd), 1e-12)
        rows.append({"cell": (int(z), int(x)), "adjoint": g_adj, "finite_difference": g_fd, "relative_error": rel})
    errors = [r["relative_error"] for r in rows]
    median = float(np.median(errors)) if errors else 0.0
    worst = float(np.max(errors)) if errors else 0.0
    report = {"cells": rows, "median_relative_error": median, "max_relative_error": worst, "eps": eps,
              "truncation_dominated": eps >= 100.0,
              "passed": median < 1e-3 and worst < 1e-2}
    if report["truncation_dominated"]:
        warnings.warn(f"⚠️ Perturbation eps={eps} m/s is large enough for truncation error to dominate the comparison")
    logger.info(f"Gradient check on {len(rows)} cells: median {median:.2e}, max {worst:.2e}")
    return report


def directional_check(vmap: np.ndarray, config: SimConfig, loss_fn, direction: np.ndarray, h: float = None, fd_dtype=np.float64,
                      adjoint_dtype=Config.field_dtype) -> dict:
    """Compares <dL/dv, dv> with (L(v + h dv) - L(v - h dv)) / 2h."""
    vmap = np.asarray(vmap, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if h is None:
        h = math.sqrt(np.finfo(fd_dtype).eps) * float(np.max(np.abs(vmap))) / max(float(np.max(np.abs(direction))), 1e-30)
    _, _, g = gradient(vmap.astype(adjoint_dtype), config, loss_fn, dtype=adjoint_dtype)
    adjoint_value = float(np.sum(g.astype(np.float64) * direction))
    fd_value = (_loss_value(vmap + h * direction, config, loss_fn, fd_dtype)
                - _loss_value(vmap - h * direction, config, loss_fn, fd_dtype)) / (2 * h)
    rel = abs(adjoint_value - fd_value) / max(abs(adjoint_value), abs(fd_value), 1e-12)
    return {"adjoint": adjoint_value, "finite_difference": fd_value, "relative_error": rel, "h": h}
