"""Checkpoints: one FWIBIN file holding a header block followed by parameter, moment and buffer blocks.

Block names are "param/<name>", "adam_m/<name>", "adam_v/<name>" and "buffer/<name>". The header block is named
"__header__", carries an empty payload and keeps NetConfig, optimizer state and provenance in its meta.
"""
import logging
from pathlib import Path

import numpy as np

from .. import fwibin
from ..config import Config
from ..errors import GeometryMismatchError
from .network import NetConfig, InversionNet, build_inversion_net
from .optim import TrainState

logger = logging.getLogger("NNet")

HEADER = "__header__"


def save_checkpoint(path, net: InversionNet, state: TrainState, extra: dict = None) -> Path:
    path = Path(path)
    meta = {"schema_version": Config.checkpoint_schema_version,
            "net_config": net.cfg.to_dict(),
            "step": int(state.step),
            "lr": float(state.lr),
            "weight_decay": float(state.weight_decay),
            "betas": [float(b) for b in state.betas],
            "eps": float(state.eps),
            "seed": int(state.seed),
            "schedule_anchor": int(state.schedule_anchor),
            "history": [float(h) for h in state.history]}
    if extra:
        meta["extra"] = extra
    blocks = [(HEADER, np.zeros(0, dtype=np.float32), meta)]
    for name, p in net.parameters().items():
        blocks.append((f"param/{name}", p.data, None))
    for name in net.parameters():
        blocks.append((f"adam_m/{name}", state.m[name], None))
        blocks.append((f"adam_v/{name}", state.v[name], None))
    for name, value in net.buffers().items():
        blocks.append((f"buffer/{name}", value, None))
    fwibin.save_many(path, blocks)
    logger.info(f"Checkpoint at step {state.step} written to '{path}'")
    return path


def load_checkpoint(path) -> tuple[InversionNet, TrainState, dict]:
    """Rebuilds the network and its optimizer state. Returns (net, state, header meta)."""
    blocks = fwibin.load_many(path)
    if not blocks or blocks[0][1].get("name") != HEADER:
        raise ValueError(f"🚨 '{path}' is not a checkpoint (missing {HEADER} block)")
    meta = blocks[0][1]["meta"]
    if meta.get("schema_version") != Config.checkpoint_schema_version:
        raise ValueError(f"🚨 Checkpoint schema {meta.get('schema_version')} is not supported")
    net = build_inversion_net(NetConfig.from_dict(meta["net_config"]))
    tensors = {header["name"]: values for values, header in blocks[1:]}
    params = net.parameters()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in tensors:
            raise GeometryMismatchError(f"🚨 Checkpoint '{path}' lacks parameter '{name}'")
        if tensors[key].shape != p.data.shape:
            raise GeometryMismatchError(f"🚨 Parameter '{name}' has shape {tensors[key].shape} in the checkpoint, the network expects {p.data.shape}")
        p.data = tensors[key].copy()
    net.load_buffers({k[len("buffer/"):]: v for k, v in tensors.items() if k.startswith("buffer/")})
    state = TrainState(params,
                       {name: tensors[f"adam_m/{name}"].copy() for name in params},
                       {name: tensors[f"adam_v/{name}"].copy() for name in params},
                       step=meta["step"], lr=meta["lr"], weight_decay=meta["weight_decay"], betas=tuple(meta["betas"]),
                       eps=meta["eps"], seed=meta["seed"], schedule_anchor=meta["schedule_anchor"],
                       history=list(meta["history"]))
    return net, state, meta
