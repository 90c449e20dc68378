import logging
from dataclasses import dataclass, field

import numpy as np

from ..config import Config
from ..errors import TrainingDivergedError

logger = logging.getLogger("NNet")


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int = 0
    lr: float = Config.initial_lr
    weight_decay: float = Config.weight_decay
    betas: tuple = Config.adamw_betas
    eps: float = Config.adamw_eps
    seed: int = 0
    # Index into the validation history where the current plateau window starts
    schedule_anchor: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, params: dict, lr: float = Config.initial_lr, weight_decay: float = Config.weight_decay, seed: int = 0, **kwargs):
        m = {name: np.zeros_like(p.data) for name, p in params.items()}
        v = {name: np.zeros_like(p.data) for name, p in params.items()}
        return cls(params, m, v, lr=lr, weight_decay=weight_decay, seed=seed, **kwargs)

    def grads(self) -> dict:
        """Current '.grad' buffers of the parameters (zeros where no gradient flowed)."""
        return {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in self.params.items()}


def optimizer_step(state: TrainState, grads: dict) -> TrainState:
    """AdamW: bias-corrected moments and weight decay applied directly to the parameters."""
    beta1, beta2 = state.betas
    for name, p in state.params.items():
        if name not in grads:
            raise ValueError(f"🚨 No gradient given for parameter '{name}'")
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise ValueError(f"🚨 Gradient of '{name}' has shape {g.shape}, the parameter has {p.data.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise TrainingDivergedError(f"🚨 Non-finite gradient at step {state.step}: {bad} of {g.size} entries of '{name}' "
                                        f"(lr={state.lr:.3g}, max |param|={float(np.max(np.abs(p.data))):.3g})")
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, p in state.params.items():
        g = np.asarray(grads[name], dtype=p.data.dtype)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data *= (1.0 - state.lr * state.weight_decay)
        p.data -= (state.lr * update).astype(p.data.dtype)
    return state


def lr_schedule(state: TrainState, val_loss_history, patience: int = Config.plateau_patience,
                threshold: float = Config.plateau_threshold, factor: float = Config.lr_factor,
                min_lr: float = Config.min_lr) -> float:
    """Divides the learning rate by 1/factor when the last 'patience' losses do not improve by more than 'threshold'
    (relative) on the best one seen before them, never going below min_lr. Updates state.lr and returns it.
    """
    history = list(val_loss_history)
    if not history:
        raise ValueError("🚨 The learning-rate schedule needs at least one validation loss")
    window = history[state.schedule_anchor:]
    if len(window) <= patience:
        return state.lr
    best_before = min(window[:-patience])
    recent = min(window[-patience:])
    if recent < best_before * (1.0 - threshold):
        return state.lr
    new_lr = max(state.lr * factor, min_lr)
    if new_lr < state.lr:
        logger.info(f"Validation loss plateaued at {recent:.4g}, learning rate {state.lr:.3g} -> {new_lr:.3g}")
    state.lr = new_lr
    state.schedule_anchor = len(history)
    return state.lr
