"""Inversion drivers.

classic_fwi updates one velocity map by adjoint gradients of ||p - f(v)||^2 + lambda R(v).
upfwi_train trains the encoder-decoder with the simulator in the loop: the network maps gathers to velocities, the
simulator maps them back to gathers and only the reconstruction loss on gathers drives the parameters.
"""
import math
import logging
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.ndimage import gaussian_filter
from threadpoolctl import threadpool_limits
from tqdm import tqdm

from . import config
from .adjoint import gradient
from .config import Config
from .errors import InvalidArgumentError, GeometryMismatchError, StabilityError, TrainingDivergedError
from .geogen import CorpusReader
from .lossmetrics import (LossWeights, ReconstructionLoss, FeatureExtractor, velocity_metrics, seismic_metrics,
                          add_gaussian_noise, drop_traces, denormalize_velocity)
from .nnet import (NetConfig, TrainState, build_inversion_net, forward, prepare_input, optimizer_step, lr_schedule,
                   save_checkpoint, load_checkpoint, no_grad)
from .tools import custom_warning, custom_progress, config_hash, read_json, write_json, write_csv, append_json_line, json_safe
from .wavesim import SimConfig, forward_model, check_cfl

logger = logging.getLogger("Inversion")
warnings.showwarning = custom_warning

CHECKPOINT = "checkpoint.fwib"
TRAIN_LOG = "train_log.jsonl"


# ---------------------------------------------------------------------------------------------------- Classic FWI
@dataclass
class ClassicFwiConfig:
    initial: str = "ramp"
    ramp: tuple = (Config.velocity_min, Config.velocity_max)
    constant_velocity: float = 4500.0
    smoothing_sigma: float = 0.0
    regularizer: str = "none"
    reg_weight: float = 0.0
    max_iter: int = 200
    step_rule: str = "backtracking"
    initial_step: float = 50.0
    armijo: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 12
    tol: float = 1e-6
    bounds: tuple = None

    def validate(self) -> None:
        if self.initial not in ("ramp", "constant", "provided"):
            raise InvalidArgumentError(f"🚨 Unknown initial guess policy '{self.initial}'")
        if self.regularizer not in ("none", "l2", "l1"):
            raise InvalidArgumentError(f"🚨 Unknown regularizer '{self.regularizer}'")
        if self.reg_weight < 0:
            raise InvalidArgumentError(f"🚨 Regularization weight cannot be negative (got {self.reg_weight})")
        if self.max_iter < 1:
            raise InvalidArgumentError(f"🚨 At least one iteration is needed (got {self.max_iter})")
        if self.step_rule not in ("fixed", "backtracking"):
            raise InvalidArgumentError(f"🚨 Unknown step rule '{self.step_rule}'")
        if self.initial_step <= 0 or not 0 < self.backtrack_factor < 1:
            raise InvalidArgumentError("🚨 The initial step must be positive and the backtracking factor in (0, 1)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"🚨 Unknown ClassicFwiConfig fields {sorted(unknown)}")
        cfg = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))


def initial_model(sim: SimConfig, cfg: ClassicFwiConfig, provided: np.ndarray = None) -> np.ndarray:
    if cfg.initial == "ramp":
        column = np.linspace(cfg.ramp[0], cfg.ramp[1], sim.nz)
        v0 = np.repeat(column[:, None], sim.nx, axis=1)
    elif cfg.initial == "constant":
        v0 = np.full((sim.nz, sim.nx), cfg.constant_velocity)
    else:
        if provided is None:
            raise InvalidArgumentError("🚨 The 'provided' initial guess policy needs an initial velocity map")
        v0 = np.asarray(provided, dtype=np.float64)
        if cfg.smoothing_sigma > 0:
            v0 = gaussian_filter(v0, cfg.smoothing_sigma, mode="nearest")
    return v0.astype(np.float32)


def _regularizer(v: np.ndarray, cfg: ClassicFwiConfig) -> tuple[float, np.ndarray]:
    if cfg.regularizer == "none" or cfg.reg_weight == 0:
        return 0.0, np.zeros_like(v, dtype=np.float64)
    v = v.astype(np.float64)
    if cfg.regularizer == "l2":
        return cfg.reg_weight * float(np.sum(v * v)), 2.0 * cfg.reg_weight * v
    return cfg.reg_weight * float(np.sum(np.abs(v))), cfg.reg_weight * np.sign(v)


def _misfit(observed: np.ndarray):
    observed = observed.astype(np.float64)

    def loss_fn(gather):
        residual = gather.astype(np.float64) - observed
        return float(np.sum(residual * residual)), (2.0 * residual).astype(gather.dtype)
    return loss_fn


def _objective(v: np.ndarray, observed: np.ndarray, sim: SimConfig, cfg: ClassicFwiConfig) -> tuple[float, float]:
    # Evaluated in the taped precision used by gradient()
    misfit, _ = _misfit(observed)(forward_model(v, sim, Config.tape_dtype).data)
    reg, _ = _regularizer(v, cfg)
    return misfit + reg, misfit


def classic_fwi(observed, sim: SimConfig, cfg: ClassicFwiConfig = None, initial: np.ndarray = None) -> tuple[np.ndarray, pd.DataFrame]:
    """Returns the best iterate and the per-iteration trace (iteration, objective, misfit, step, backtracks)."""
    cfg = cfg if cfg is not None else ClassicFwiConfig()
    cfg.validate()
    observed = np.asarray(getattr(observed, "data", observed))
    if observed.shape != sim.gather_shape:
        raise GeometryMismatchError(f"🚨 Observed gather has shape {observed.shape}, the geometry produces {sim.gather_shape}")
    v = initial_model(sim, cfg, initial)
    loss_fn = _misfit(observed)
    target = cfg.tol * 0.5 * float(np.sum(observed.astype(np.float64) ** 2))
    rows = []
    best_v, best_objective = v.copy(), math.inf
    for iteration in tqdm(range(cfg.max_iter + 1), desc="Classic FWI", disable=not config.show_progress):
        misfit, _, g_data = gradient(v, sim, loss_fn)
        reg, g_reg = _regularizer(v, cfg)
        objective = misfit + reg
        if objective < best_objective:
            best_v, best_objective = v.copy(), objective
        row = {"iteration": iteration, "objective": objective, "misfit": misfit, "step": 0.0, "backtracks": 0}
        rows.append(row)
        logger.info(f"Iteration {iteration}: objective {objective:.6g} (misfit {misfit:.6g})")
        if misfit <= target or iteration == cfg.max_iter:
            break
        g = g_data.astype(np.float64) + g_reg
        g_max = float(np.max(np.abs(g)))
        if g_max == 0.0:
            break
        tau = cfg.initial_step / g_max
        accepted = None
        for backtrack in range(cfg.max_backtracks + 1):
            v_try = v - tau * g
            if cfg.bounds is not None:
                v_try = np.clip(v_try, cfg.bounds[0], cfg.bounds[1])
            v_try = v_try.astype(np.float32)
            try:
                J_try, _ = _objective(v_try, observed, sim, cfg)
            except (StabilityError, InvalidArgumentError) as e:
                # Steps leaving the stable or positive velocity range are shortened
                logger.info(f"Trial step rejected: {e}")
                tau *= cfg.backtrack_factor
                continue
            decrease = float(np.sum(g * (v_try.astype(np.float64) - v)))
            if cfg.step_rule == "fixed" or J_try <= objective + cfg.armijo * decrease:
                accepted = (v_try, tau, backtrack)
                break
            tau *= cfg.backtrack_factor
        if accepted is None:
            custom_progress(f"Line search found no decrease after {cfg.max_backtracks} backtracks, stopping at iteration {iteration}")
            break
        v, row["step"], row["backtracks"] = accepted
    return best_v, pd.DataFrame(rows)


# ---------------------------------------------------------------------------------------------------- UPFWI
@dataclass
class UpfwiConfig:
    corpus: str = "corpus"
    train_splits: list = field(default_factory=lambda: ["unlabeled"])
    val_split: str = "val"
    max_train_samples: int = None
    batch_size: int = 8
    epochs: int = 30
    loss: dict = field(default_factory=lambda: LossWeights().to_dict())
    net: dict = field(default_factory=lambda: {"latent_dim": 128, "channel_scale": 0.25, "time_decimation": 4,
                                               "first_temporal_stride": 1})
    lr: float = Config.initial_lr
    weight_decay: float = Config.weight_decay
    patience: int = Config.plateau_patience
    eval_every: int = 1
    seed: int = 0
    feature_seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise InvalidArgumentError(f"🚨 Batch size must be at least 1 (got {self.batch_size})")
        if self.epochs < 1:
            raise InvalidArgumentError(f"🚨 At least one epoch is needed (got {self.epochs})")
        if self.eval_every < 1:
            raise InvalidArgumentError(f"🚨 eval_every must be at least 1 (got {self.eval_every})")
        if self.max_train_samples is not None and self.max_train_samples < 1:
            raise InvalidArgumentError(f"🚨 max_train_samples must be at least 1 (got {self.max_train_samples})")
        if self.lr < 0 or self.weight_decay < 0:
            raise InvalidArgumentError("🚨 Learning rate and weight decay cannot be negative")
        LossWeights(**self.loss)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.loss)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"🚨 Unknown UpfwiConfig fields {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("loss"), str):
            d["loss"] = LossWeights.preset(d["loss"]).to_dict()
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        cfg = cls.from_dict(read_json(path))
        corpus = Path(cfg.corpus)
        if not corpus.is_absolute():
            # Relative corpus paths are resolved against the config file
            cfg.corpus = str(Path(path).parent / corpus)
        return cfg


def _sample_gradient(v: np.ndarray, sim: SimConfig, loss_fn) -> tuple[float, np.ndarray]:
    with threadpool_limits(1):
        value, _, g = gradient(v, sim, loss_fn)
    return value, g


def _sample_loss(v: np.ndarray, sim: SimConfig, loss_fn) -> tuple[float, np.ndarray]:
    with threadpool_limits(1):
        gather = forward_model(v, sim).data
        value, _ = loss_fn(gather)
    return value, gather


def _predict(net, gathers: np.ndarray, scale: float, batch_size: int, v_range: tuple) -> np.ndarray:
    """Network velocities (N, H, W) in m/s for raw gathers, with normalization layers in inference mode."""
    net.eval()
    out = []
    with no_grad():
        for start in range(0, len(gathers), batch_size):
            x = prepare_input(gathers[start:start + batch_size], net.cfg, scale)
            out.append(denormalize_velocity(forward(net, x).data, *v_range).astype(np.float32))
    net.train()
    if not out:
        return np.zeros((0,) + net.cfg.output_shape, dtype=np.float32)
    return np.concatenate(out)


def _reconstruction_loss(velocities: np.ndarray, gathers: np.ndarray, sim: SimConfig, loss: ReconstructionLoss, scale: float) -> float:
    results = Parallel(n_jobs=config.n_jobs, prefer="threads")(
        delayed(_sample_loss)(v, sim, loss.against(g / scale, scale)) for v, g in zip(velocities, gathers))
    return float(np.mean([r[0] for r in results])) if results else math.nan


def upfwi_train(cfg: UpfwiConfig, out_dir) -> tuple[Path, list[dict]]:
    """Trains the inversion network on gathers only. Returns the checkpoint path and the per-epoch log."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reader = CorpusReader(cfg.corpus)
    sim = reader.sim
    v_min, v_max = reader.velocity_range
    check_cfl(np.full((sim.nz, sim.nx), v_max), sim)
    scale = reader.data_scale
    # Only gathers are read for training; velocity labels are never loaded on this path
    gathers = np.concatenate([reader.gathers(split) for split in cfg.train_splits])
    if cfg.max_train_samples is not None:
        gathers = gathers[:cfg.max_train_samples]
    if len(gathers) == 0:
        raise InvalidArgumentError(f"🚨 Splits {cfg.train_splits} of '{cfg.corpus}' hold no training gathers")
    val_gathers = reader.gathers(cfg.val_split) if cfg.val_split else gathers[:0]
    net_cfg = NetConfig.for_simulation(sim, **{**cfg.net, "seed": cfg.seed})
    net = build_inversion_net(net_cfg)
    state = TrainState.create(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, seed=cfg.seed)
    weights = cfg.loss_weights
    loss = ReconstructionLoss(weights, FeatureExtractor(cfg.feature_seed) if weights.uses_features else None)
    rng = np.random.default_rng(cfg.seed)
    checkpoint = out_dir / CHECKPOINT
    log_path = out_dir / TRAIN_LOG
    if log_path.exists():
        log_path.unlink()
    last_good = None
    extra = {"sim_config_hash": reader.sim_hash, "data_scale": scale, "velocity_range": [v_min, v_max],
             "upfwi_config_hash": cfg.hash(), "loss": weights.to_dict()}
    dv_dout = 0.5 * (v_max - v_min)
    log = []
    custom_progress(f"Training on {len(gathers)} gathers for {cfg.epochs} epochs ({net.parameter_count()} parameters)")
    for epoch in range(1, cfg.epochs + 1):
        lr_used = state.lr
        order = rng.permutation(len(gathers))
        batch_losses = []
        batches = range(0, len(order), cfg.batch_size)
        for start in tqdm(batches, desc=f"Epoch {epoch}", disable=not config.show_progress):
            idx = order[start:start + cfg.batch_size]
            raw = gathers[idx]
            net.zero_grad()
            out = forward(net, prepare_input(raw, net_cfg, scale))
            velocities = denormalize_velocity(out.data, v_min, v_max).astype(np.float32)
            results = Parallel(n_jobs=config.n_jobs, prefer="threads")(
                delayed(_sample_gradient)(v, sim, loss.against(g / scale, scale)) for v, g in zip(velocities, raw))
            batch_loss = float(np.mean([r[0] for r in results]))
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(f"🚨 Training loss became {batch_loss} at epoch {epoch}", last_good)
            seed = np.stack([r[1] for r in results]).astype(out.data.dtype) * np.float32(dv_dout / len(idx))
            out.backward(seed)
            try:
                optimizer_step(state, state.grads())
            except TrainingDivergedError as e:
                raise TrainingDivergedError(str(e), last_good)
            batch_losses.append(batch_loss)
        record = {"epoch": epoch, "lr": lr_used, "train_loss": float(np.mean(batch_losses)), "config_hash": cfg.hash()}
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            if len(val_gathers):
                val_velocities = _predict(net, val_gathers, scale, cfg.batch_size, (v_min, v_max))
                record["val_loss"] = _reconstruction_loss(val_velocities, val_gathers, sim, loss, scale)
                if reader.has_labels(cfg.val_split):
                    record.update(velocity_metrics(reader.velocities(cfg.val_split), val_velocities, v_min, v_max))
            else:
                record["val_loss"] = record["train_loss"]
            state.history.append(record["val_loss"])
            lr_schedule(state, state.history, patience=cfg.patience)
        logger.info(f"Epoch {epoch}: {record}")
        log.append(record)
        append_json_line(log_path, record)
        save_checkpoint(checkpoint, net, state, {**extra, "epoch": epoch})
        last_good = str(checkpoint)
    return checkpoint, log


# ---------------------------------------------------------------------------------------------------- Evaluation
def _check_geometry(meta: dict, reader: CorpusReader, net_cfg: NetConfig) -> None:
    expected = meta.get("extra", {}).get("sim_config_hash")
    if expected != reader.sim_hash:
        raise GeometryMismatchError(f"🚨 Checkpoint was trained on simulation config {expected}, the corpus uses {reader.sim_hash}")
    S, nt, R = reader.sim.gather_shape
    if (S, math.ceil(nt / net_cfg.time_decimation), R) != net_cfg.input_shape or (reader.sim.nz, reader.sim.nx) != net_cfg.output_shape:
        raise GeometryMismatchError(f"🚨 Network shapes {net_cfg.input_shape} -> {net_cfg.output_shape} do not fit the corpus geometry")


def mean_velocity_baseline(reader: CorpusReader, split: str = "test") -> dict:
    """Metrics of a constant map at the mean velocity of the split."""
    truth = reader.velocities(split)
    return velocity_metrics(truth, np.full_like(truth, float(np.mean(truth))), *reader.velocity_range)


def evaluate(checkpoint, corpus, noises=(), drops=(), seed: int = 0, split: str = "test", with_seismic: bool = False,
             batch_size: int = 8, out_dir=None) -> pd.DataFrame:
    """Velocity metrics on a labeled split, clean and under each input corruption. Returns one row per setting.

    Corruptions act on the normalized network inputs only.
    """
    net, _, meta = load_checkpoint(checkpoint)
    reader = CorpusReader(corpus)
    _check_geometry(meta, reader, net.cfg)
    if not reader.has_labels(split):
        raise InvalidArgumentError(f"🚨 Split '{split}' of '{corpus}' has no velocity labels to evaluate against")
    scale = float(meta["extra"]["data_scale"])
    v_range = tuple(meta["extra"]["velocity_range"])
    gathers = reader.gathers(split)
    truth = reader.velocities(split)
    settings = [("clean", 0.0)] + [("noise", float(s)) for s in noises] + [("drop", int(k)) for k in drops]
    rows = []
    for kind, level in settings:
        corrupted = gathers / scale
        psnrs = []
        if kind == "noise":
            noisy = [add_gaussian_noise(g, level, seed + i) for i, g in enumerate(corrupted)]
            corrupted = np.stack([n[0] for n in noisy])
            psnrs = [n[1] for n in noisy]
        elif kind == "drop":
            corrupted = np.stack([drop_traces(g, level, seed + i) for i, g in enumerate(corrupted)])
        predicted = _predict(net, corrupted, 1.0, batch_size, v_range)
        row = {"corruption": kind, "level": level, **velocity_metrics(truth, predicted, *v_range)}
        row["psnr"] = float(np.mean(psnrs)) if psnrs else math.inf
        if with_seismic:
            simulated = Parallel(n_jobs=config.n_jobs, prefer="threads")(
                delayed(forward_model)(v, reader.sim) for v in predicted)
            seismic = seismic_metrics(gathers / scale, np.stack([s.data for s in simulated]) / scale)
            row.update({f"seismic_{k}": v for k, v in seismic.items()})
        row["config_hash"] = meta["extra"]["sim_config_hash"]
        rows.append(row)
        logger.info(f"Evaluation {kind}={level}: {row}")
    table = pd.DataFrame(rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "metrics.json", {"checkpoint": str(checkpoint), "split": split,
                                              "rows": [{k: json_safe(v) for k, v in r.items()} for r in rows]})
        write_csv(out_dir / "metrics.csv", table)
    return table


# ---------------------------------------------------------------------------------------------------- Experiments
def run_ablation(cfg: UpfwiConfig, out_dir, presets=("pixel_l2", "pixel_l1l2", "full"), split: str = "test") -> pd.DataFrame:
    """Trains one network per loss preset on the same corpus and seeds and evaluates each on 'split'."""
    out_dir = Path(out_dir)
    rows = []
    for name in presets:
        variant = UpfwiConfig.from_dict({**cfg.to_dict(), "loss": LossWeights.preset(name).to_dict()})
        custom_progress(f"Ablation run '{name}'")
        checkpoint, _ = upfwi_train(variant, out_dir / name)
        table = evaluate(checkpoint, cfg.corpus, split=split, with_seismic=True)
        rows.append({"loss": name, **table.iloc[0].to_dict()})
    result = pd.DataFrame(rows)
    write_csv(out_dir / "ablation.csv", result)
    return result


def run_data_scaling(cfg: UpfwiConfig, out_dir, sample_counts=(200, 400), split: str = "val") -> pd.DataFrame:
    """Trains one network per training-set size (the first n gathers of the training splits) and evaluates on 'split'."""
    out_dir = Path(out_dir)
    rows = []
    for n in sample_counts:
        variant = UpfwiConfig.from_dict({**cfg.to_dict(), "max_train_samples": int(n)})
        custom_progress(f"Data scaling run with {n} training gathers")
        checkpoint, _ = upfwi_train(variant, out_dir / f"n{n}")
        table = evaluate(checkpoint, cfg.corpus, split=split)
        rows.append({"train_samples": int(n), **table.iloc[0].to_dict()})
    result = pd.DataFrame(rows)
    write_csv(out_dir / "data_scaling.csv", result)
    return result


def run_robustness(checkpoint, corpus, noises=(0.5e-4, 1e-4, 5e-4), drops=(4, 7, 17), seed: int = 0, out_dir=None) -> pd.DataFrame:
    return evaluate(checkpoint, corpus, noises=noises, drops=drops, seed=seed, out_dir=out_dir)
