"""Layered velocity maps with one geological fault (flat or sine-shaped interfaces) and corpora of their gathers.

Every record is a pure function of (GeoParams.seed, index), so a corpus can be rebuilt from its manifest.
"""
import math
import logging
import warnings
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits
from tqdm import tqdm

from . import config
from . import fwibin
from .config import Config
from .errors import InvalidArgumentError, CorpusIOError
from .tools import custom_warning, custom_progress, config_hash, read_json, write_json
from .wavesim import SimConfig, ShotGather, forward_model, benchmark_geometry

logger = logging.getLogger("GeoGen")
warnings.showwarning = custom_warning

SPLITS = ("labeled", "unlabeled", "val", "test")
LABELED_SPLITS = ("labeled", "val", "test")
TRAINING_SPLITS = ("labeled", "unlabeled")
DESK_SIZES = {"labeled": 200, "unlabeled": 200, "val": 30, "test": 30}
SHARD_SIZE = 50
MANIFEST = "manifest.json"


@dataclass
class GeoParams:
    kind: str = "flat"
    n_layers: tuple = (2, 4)
    layer_thickness_range: tuple = (15, 35)
    velocity_range: tuple = (Config.velocity_min, Config.velocity_max)
    fault_shift_range: tuple = (10, 20)
    fault_angle_range: tuple = (-123.0, 123.0)
    curve_amplitude_range: tuple = (5.0, 15.0)
    curve_period_range: tuple = (35.0, 140.0)
    seed: int = 0
    nz: int = 70
    nx: int = 70
    add_fault: bool = True

    @classmethod
    def desk(cls, kind: str = "flat", seed: int = 0):
        """Ranges scaled to a 35x35 map."""
        return cls(kind=kind, layer_thickness_range=(8, 17), fault_shift_range=(5, 10), curve_amplitude_range=(3.0, 7.0),
                   curve_period_range=(18.0, 70.0), seed=seed, nz=35, nx=35)

    def validate(self) -> None:
        if self.kind not in ("flat", "curved"):
            raise InvalidArgumentError(f"🚨 Unknown geology kind '{self.kind}' (expected 'flat' or 'curved')")
        low, high = self.n_layers
        if not 1 <= low <= high:
            raise InvalidArgumentError(f"🚨 Invalid layer-count range {self.n_layers}")
        t_min, t_max = self.layer_thickness_range
        if not 1 <= t_min <= t_max:
            raise InvalidArgumentError(f"🚨 Invalid layer thickness range {self.layer_thickness_range}")
        if high * t_min > self.nz:
            raise InvalidArgumentError(f"🚨 {high} layers of at least {t_min} cells do not fit in depth {self.nz}")
        v_min, v_max = self.velocity_range
        if not 0 < v_min <= v_max:
            raise InvalidArgumentError(f"🚨 Invalid velocity range {self.velocity_range}")
        s_min, s_max = self.fault_shift_range
        if not 0 <= s_min <= s_max:
            raise InvalidArgumentError(f"🚨 Invalid fault shift range {self.fault_shift_range}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"🚨 Unknown GeoParams fields {sorted(unknown)}")
        params = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
        params.validate()
        return params


@dataclass
class GeoSample:
    velocity: np.ndarray
    index: int
    record_seed: int
    layer_thicknesses: list
    layer_velocities: list
    curve: dict = None
    fault: dict = None
    fault_mask: np.ndarray = field(default=None, repr=False)


def record_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _sample_thicknesses(rng: np.random.Generator, n: int, params: GeoParams) -> list[int]:
    # The deepest layer is a half-space filling what is left of the model
    t_min, t_max = params.layer_thickness_range
    thicknesses = []
    depth = 0
    for i in range(n - 1):
        upper = min(t_max, params.nz - depth - (n - 1 - i) * t_min)
        t = int(rng.integers(t_min, upper + 1))
        thicknesses.append(t)
        depth += t
    thicknesses.append(params.nz - depth)
    return thicknesses


def _apply_fault(vmap: np.ndarray, rng: np.random.Generator, params: GeoParams) -> tuple[np.ndarray, dict, np.ndarray]:
    nz, nx = vmap.shape
    anchor_z = int(rng.integers(nz // 5, nz - nz // 5))
    anchor_x = int(rng.integers(nx // 5, nx - nx // 5))
    angle = float(rng.uniform(*params.fault_angle_range))
    shift = int(rng.integers(params.fault_shift_range[0], params.fault_shift_range[1] + 1))
    # The fault line runs through the anchor at 'angle' from the vertical; cells on the positive side of its
    # normal slide down by 'shift' cells, the top rows repeating the shallowest velocity
    theta = math.radians(angle)
    z, x = np.mgrid[0:nz, 0:nx]
    mask = (-math.sin(theta) * (z - anchor_z) + math.cos(theta) * (x - anchor_x)) > 0
    source_rows = np.maximum(z - shift, 0)
    shifted = vmap[source_rows, x]
    faulted = np.where(mask, shifted, vmap)
    return faulted, {"anchor": [anchor_z, anchor_x], "angle": angle, "shift": shift}, mask


def sample_geology(params: GeoParams, index: int) -> GeoSample:
    params.validate()
    seed = record_seed(params.seed, index)
    rng = np.random.default_rng(seed)
    n = int(rng.integers(params.n_layers[0], params.n_layers[1] + 1))
    thicknesses = _sample_thicknesses(rng, n, params)
    velocities = sorted(float(v) for v in rng.uniform(params.velocity_range[0], params.velocity_range[1], size=n))
    bases = np.cumsum(thicknesses[:-1])
    x = np.arange(params.nx)
    curve = None
    if params.kind == "curved":
        amplitude = float(rng.uniform(*params.curve_amplitude_range))
        period = float(rng.uniform(*params.curve_period_range))
        phase = float(rng.uniform(0.0, 2.0 * math.pi))
        offset = amplitude * np.sin(2.0 * math.pi * x / period + phase)
        curve = {"amplitude": amplitude, "period": period, "phase": phase}
    else:
        offset = np.zeros(params.nx)
    # Interfaces share one sine, so they stay parallel and never cross
    interfaces = bases[:, None] + offset[None, :]
    z = np.arange(params.nz)[:, None, None]
    layer = np.sum(z >= interfaces[None, :, :], axis=1)
    vmap = np.asarray(velocities)[layer]
    fault, mask = None, np.zeros(vmap.shape, dtype=bool)
    if params.add_fault:
        vmap, fault, mask = _apply_fault(vmap, rng, params)
    return GeoSample(vmap.astype(Config.field_dtype), index, seed, thicknesses, velocities, curve, fault, mask)


def gen_velocity(params: GeoParams, index: int) -> np.ndarray:
    return sample_geology(params, index).velocity


def check_constraints(sample: GeoSample, params: GeoParams) -> list[str]:
    """Returns a description of every violated generation constraint (empty when the sample is valid)."""
    violations = []
    n = len(sample.layer_thicknesses)
    if not params.n_layers[0] <= n <= params.n_layers[1]:
        violations.append(f"layer count {n} outside {params.n_layers}")
    t_min, t_max = params.layer_thickness_range
    for i, t in enumerate(sample.layer_thicknesses[:-1]):
        if not t_min <= t <= t_max:
            violations.append(f"layer {i} thickness {t} outside {params.layer_thickness_range}")
    if sample.layer_thicknesses[-1] < t_min:
        violations.append(f"deepest layer thickness {sample.layer_thicknesses[-1]} below {t_min}")
    if sum(sample.layer_thicknesses) != params.nz:
        violations.append(f"thicknesses sum to {sum(sample.layer_thicknesses)}, not {params.nz}")
    if list(sample.layer_velocities) != sorted(sample.layer_velocities):
        violations.append("layer velocities do not increase with depth")
    v_min, v_max = params.velocity_range
    if float(sample.velocity.min()) < v_min or float(sample.velocity.max()) > v_max:
        violations.append(f"velocities [{sample.velocity.min():.1f}, {sample.velocity.max():.1f}] outside {params.velocity_range}")
    if sample.fault is not None:
        if not params.fault_shift_range[0] <= sample.fault["shift"] <= params.fault_shift_range[1]:
            violations.append(f"fault shift {sample.fault['shift']} outside {params.fault_shift_range}")
        if not params.fault_angle_range[0] <= sample.fault["angle"] <= params.fault_angle_range[1]:
            violations.append(f"fault angle {sample.fault['angle']:.1f} outside {params.fault_angle_range}")
    mask = sample.fault_mask if sample.fault_mask is not None else np.zeros(sample.velocity.shape, dtype=bool)
    for col in range(sample.velocity.shape[1]):
        column = sample.velocity[:, col]
        # Monotonicity is only required within each run of cells on the same side of the fault
        breaks = np.flatnonzero(np.diff(mask[:, col].astype(np.int8)) != 0) + 1
        for segment in np.split(column, breaks):
            if np.any(np.diff(segment) < 0):
                violations.append(f"column {col} decreases with depth")
                break
    return violations


def gen_shot(vmap: np.ndarray, sim: SimConfig = None) -> ShotGather:
    return forward_model(vmap, sim if sim is not None else benchmark_geometry())


def _make_record(params: GeoParams, sim: SimConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    with threadpool_limits(1):
        vmap = gen_velocity(params, index)
        return vmap, forward_model(vmap, sim).data


def _shard_name(split: str, shard: int, what: str) -> str:
    return f"{split}_{shard:04d}.{what}.fwib"


def _plan_splits(sizes: dict, seed: int, shard_size: int) -> dict:
    unknown = set(sizes) - set(SPLITS)
    if unknown:
        raise InvalidArgumentError(f"🚨 Unknown corpus splits {sorted(unknown)} (expected {list(SPLITS)})")
    plan = {}
    start = 0
    for split in SPLITS:
        count = int(sizes.get(split, 0))
        if count < 0:
            raise InvalidArgumentError(f"🚨 Split '{split}' cannot have a negative size ({count})")
        indices = list(range(start, start + count))
        shards = []
        for shard, lo in enumerate(range(0, count, shard_size)):
            hi = min(lo + shard_size, count)
            shards.append({"start": indices[lo], "stop": indices[hi - 1] + 1,
                           "gather": _shard_name(split, shard, "gather"),
                           "velocity": _shard_name(split, shard, "velocity") if split in LABELED_SPLITS else None})
        plan[split] = {"count": count, "labeled": split in LABELED_SPLITS, "indices": indices,
                       "seeds": [record_seed(seed, i) for i in indices], "shards": shards}
        start += count
    return plan


def build_corpus(params: GeoParams, sizes: dict, out_dir, sim: SimConfig = None, shard_size: int = SHARD_SIZE) -> Path:
    """Generates every split, writes FWIBIN shards and returns the manifest path.

    Index ranges of the splits are contiguous and disjoint, in the order labeled, unlabeled, val, test.
    """
    params.validate()
    sim = sim if sim is not None else benchmark_geometry()
    if (sim.nz, sim.nx) != (params.nz, params.nx):
        raise InvalidArgumentError(f"🚨 Geology is {params.nz}x{params.nx} but the simulation grid is {sim.nz}x{sim.nx}")
    sim.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusIOError(f"🚨 Cannot create corpus folder '{out_dir}' ({e})")
    plan = _plan_splits(sizes, params.seed, shard_size)
    sim_hash = sim.hash()
    total = sum(p["count"] for p in plan.values())
    custom_progress(f"Generating {total} {params.kind} records into '{out_dir}'")
    peak = 0.0
    all_shards = [(split, i, shard) for split in SPLITS for i, shard in enumerate(plan[split]["shards"])]
    for split, shard_index, shard in tqdm(all_shards, desc="Shards", disable=not config.show_progress):
        records = Parallel(n_jobs=config.n_jobs)(delayed(_make_record)(params, sim, i) for i in range(shard["start"], shard["stop"]))
        velocities = np.stack([r[0] for r in records])
        gathers = np.stack([r[1] for r in records])
        if split in TRAINING_SPLITS:
            peak = max(peak, float(np.max(np.abs(gathers))))
        meta = {"config_hash": sim_hash, "split": split, "shard": shard_index, "indices": [shard["start"], shard["stop"]]}
        try:
            fwibin.save(out_dir / shard["gather"], gathers, "gather", meta)
            if shard["velocity"] is not None:
                fwibin.save(out_dir / shard["velocity"], velocities, "velocity", meta)
        except OSError as e:
            raise CorpusIOError(f"🚨 Writing {split} shard {shard_index} to '{out_dir}' failed ({e})", shard_index)
        logger.info(f"Shard {split}/{shard_index} with records [{shard['start']}, {shard['stop']}) written")
    if peak == 0.0:
        warnings.warn("⚠️ No nonzero training amplitude found; the data scale defaults to 1")
        peak = 1.0
    manifest = {"schema_version": Config.manifest_schema_version,
                "kind": params.kind,
                "geo_params": params.to_dict(),
                "geo_params_hash": config_hash(params.to_dict()),
                "sim_config": sim.to_dict(),
                "sim_config_hash": sim_hash,
                "sizes": {split: plan[split]["count"] for split in SPLITS},
                "shard_size": shard_size,
                "splits": plan,
                "data_scale": peak,
                "velocity_range": list(params.velocity_range)}
    path = out_dir / MANIFEST
    try:
        write_json(path, manifest)
    except OSError as e:
        raise CorpusIOError(f"🚨 Writing manifest '{path}' failed ({e})")
    return path


def regenerate_corpus(manifest_path, out_dir) -> Path:
    """Rebuilds a corpus from the parameters recorded in its manifest."""
    manifest = read_json(manifest_path)
    params = GeoParams.from_dict(manifest["geo_params"])
    sim = SimConfig.from_dict(manifest["sim_config"])
    return build_corpus(params, manifest["sizes"], out_dir, sim, manifest.get("shard_size", SHARD_SIZE))


class CorpusReader(object):
    """Read access to a corpus folder. Gathers and velocity labels are read through separate methods."""

    def __init__(self, path):
        path = Path(path)
        self.root = path.parent if path.is_file() else path
        manifest_path = self.root / MANIFEST
        if not manifest_path.is_file():
            raise CorpusIOError(f"🚨 No corpus manifest at '{manifest_path.absolute()}'")
        self.manifest = read_json(manifest_path)
        if self.manifest.get("schema_version") != Config.manifest_schema_version:
            raise CorpusIOError(f"🚨 Manifest schema {self.manifest.get('schema_version')} is not supported")
        self.sim = SimConfig.from_dict(self.manifest["sim_config"])
        self.data_scale = float(self.manifest["data_scale"])
        self.velocity_range = tuple(self.manifest["velocity_range"])

    @property
    def sim_hash(self) -> str:
        return self.manifest["sim_config_hash"]

    def count(self, split: str) -> int:
        return self._split(split)["count"]

    def has_labels(self, split: str) -> bool:
        info = self._split(split)
        return info["labeled"] and all((self.root / s["velocity"]).is_file() for s in info["shards"])

    def _split(self, split: str) -> dict:
        if split not in self.manifest["splits"]:
            raise InvalidArgumentError(f"🚨 Unknown split '{split}' (expected one of {list(SPLITS)})")
        return self.manifest["splits"][split]

    def _read(self, split: str, what: str) -> np.ndarray:
        info = self._split(split)
        arrays = []
        for shard_index, shard in enumerate(info["shards"]):
            if shard[what] is None:
                raise CorpusIOError(f"🚨 Split '{split}' has no {what} shards", shard_index)
            try:
                values, header = fwibin.load(self.root / shard[what])
            except (OSError, ValueError) as e:
                raise CorpusIOError(f"🚨 Reading {split} shard {shard_index} failed ({e})", shard_index)
            if header.get("meta", {}).get("config_hash") != self.sim_hash:
                raise CorpusIOError(f"🚨 {split} shard {shard_index} was produced by another simulation config", shard_index)
            arrays.append(values)
        if not arrays:
            shape = self.sim.gather_shape if what == "gather" else (self.sim.nz, self.sim.nx)
            return np.zeros((0,) + tuple(shape), dtype=np.float32)
        return np.concatenate(arrays)

    def gathers(self, split: str) -> np.ndarray:
        return self._read(split, "gather")

    def velocities(self, split: str) -> np.ndarray:
        return self._read(split, "velocity")
